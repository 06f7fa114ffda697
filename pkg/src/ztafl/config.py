"""Experiment configuration: nested dataclasses with a strict JSON round-trip."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Optional

from .errors import InvalidInputError
from .threats import ATTACK_KINDS

SEEDS = (42, 123, 456, 789, 1011)
RULES = ("fedavg", "krum", "trimmed_mean", "geomed", "fltrust", "ztafl")


@dataclass
class TopologyConfig:
    n_agents: int = 30
    n_fogs: int = 3


@dataclass
class DataConfig:
    n_samples: int = 12000
    n_features: int = 40
    n_classes: int = 6
    csv_path: Optional[str] = None
    label_column: str = "label"


@dataclass
class PartitionConfig:
    classes_per_agent: int = 3
    power_exponent: float = 1.5
    min_size: int = 50
    max_size: int = 500
    label_skew: bool = True
    quantity_skew: bool = True
    feature_skew_groups: Optional[list] = None
    holdout_frac: float = 0.1


@dataclass
class ModelConfig:
    hidden: list = field(default_factory=lambda: [64, 32])


@dataclass
class TrainConfig:
    local_epochs: int = 5
    batch_size: int = 128
    lr: float = 0.001


@dataclass
class AdversarialConfig:
    enabled: bool = True
    ratio: float = 0.3
    eps: float = 0.1
    steps: int = 1


@dataclass
class AggregationConfig:
    rule: str = "ztafl"
    krum_f: int = 3
    trim_frac: float = 0.2
    k_sigma: float = 2.0
    rollback_fraction: float = 0.8
    root_frac: float = 0.05


@dataclass
class ShapConfig:
    background_size: int = 100
    eval_samples: int = 32
    m_steps: int = 16
    eps: float = 1e-6
    drift_factor: float = 3.0


@dataclass
class AttestationConfig:
    enabled: bool = True
    dt_max_ms: int = 60_000
    tau_min: float = 0.6
    sealed: bool = True
    # [[round, agent], ...]: signed firmware manifests followed by the new PCR
    firmware_updates: list = field(default_factory=list)


@dataclass
class AttackSpec:
    kind: str = "none"
    beta: float = 0.0
    params: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 42
    seeds: list = field(default_factory=lambda: list(SEEDS))
    rounds: int = 40
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adversarial: AdversarialConfig = field(default_factory=AdversarialConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    shap: ShapConfig = field(default_factory=ShapConfig)
    attestation: AttestationConfig = field(default_factory=AttestationConfig)
    attack: AttackSpec = field(default_factory=AttackSpec)
    quantize: bool = True
    robust_every: int = 5
    robust_eps: float = 0.1

    def validate(self) -> "ExperimentConfig":
        if self.rounds < 1:
            raise InvalidInputError("rounds must be >= 1")
        if self.topology.n_fogs < 1 or self.topology.n_agents < self.topology.n_fogs:
            raise InvalidInputError("need at least one agent per fog")
        if self.aggregation.rule not in RULES:
            raise InvalidInputError(f"unknown aggregation rule {self.aggregation.rule!r}; one of {RULES}")
        if self.attack.kind not in ATTACK_KINDS:
            raise InvalidInputError(f"unknown attack kind {self.attack.kind!r}")
        if not 0.0 <= self.attack.beta < 0.5:
            raise InvalidInputError(f"attack beta {self.attack.beta} outside [0, 0.5)")
        if self.robust_every < 1:
            raise InvalidInputError("robust_every must be >= 1")
        if not 0.0 <= self.adversarial.ratio <= 1.0:
            raise InvalidInputError("adversarial ratio must be in [0, 1]")
        if self.shap.m_steps < 1 or self.shap.eval_samples < 1 or self.shap.background_size < 1:
            raise InvalidInputError("shap sizes must be >= 1")
        if len(self.model.hidden) < 1:
            raise InvalidInputError("model needs at least one hidden layer")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``{"attack.beta": 0.3}`` via ``**{...}``."""
        d = self.to_dict()
        for path, value in kw.items():
            node = d
            keys = path.split(".")
            for k in keys[:-1]:
                if k not in node:
                    raise InvalidInputError(f"unknown config key {path!r}")
                node = node[k]
            if keys[-1] not in node:
                raise InvalidInputError(f"unknown config key {path!r}")
            node[keys[-1]] = value
        return from_dict(d)


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise InvalidInputError(f"{path or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise InvalidInputError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    defaults = cls()
    for name, f in known.items():
        if name not in data:
            continue
        default = getattr(defaults, name)
        value = data[name]
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "").validate()


def loads(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"config is not valid JSON: {exc}") from None
    return from_dict(data)


def load(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def save(config: ExperimentConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config.to_json() + "\n")


def preset(scenario: str, **overrides) -> ExperimentConfig:
    """Named scenarios; extra dotted-path overrides (including ``name``) are applied on top."""
    name = scenario
    base = ExperimentConfig(name=name)
    table = {
        "clean": {},
        "label_flip": {"attack.kind": "label_flip", "attack.beta": 0.3, "attack.params": {"p_flip": 1.0}},
        "grad_scale": {"attack.kind": "grad_scale", "attack.beta": 0.2, "attack.params": {"alpha": 5.0}},
        "backdoor": {"attack.kind": "backdoor", "attack.beta": 0.2,
                     "attack.params": {"rate": 0.1, "target_class": 0}},
        "sybil": {"attack.kind": "sybil", "attack.beta": 0.2, "attack.params": {"fakes_per_attacker": 2}},
        "replay": {"attack.kind": "replay", "attack.beta": 0.2},
        "shap_constrained": {"attack.kind": "shap_constrained", "attack.beta": 0.2,
                             "attack.params": {"constraint_tau": 0.05, "steps": 5}},
        "slow_poison": {"attack.kind": "slow_poison", "attack.beta": 0.1,
                        "attack.params": {"per_round_alpha": 0.05}},
    }
    if name not in table:
        raise InvalidInputError(f"unknown preset {name!r}; one of {sorted(table)}")
    cfg = base.with_overrides(**table[name]) if table[name] else base
    return cfg.with_overrides(**overrides) if overrides else cfg


ABLATION_ROWS = (
    ("baseline", {"aggregation.rule": "fedavg", "attestation.enabled": False, "adversarial.enabled": False}),
    ("+attestation", {"aggregation.rule": "fedavg", "attestation.enabled": True, "adversarial.enabled": False}),
    ("+shap", {"aggregation.rule": "ztafl", "attestation.enabled": False, "adversarial.enabled": False}),
    ("+adversarial", {"aggregation.rule": "fedavg", "attestation.enabled": False, "adversarial.enabled": True}),
    ("+all", {"aggregation.rule": "ztafl", "attestation.enabled": True, "adversarial.enabled": True}),
)


def ablation_configs(base: Optional[ExperimentConfig] = None) -> list:
    base = base or preset("label_flip")
    return [base.with_overrides(name=f"ablation{label}", **kw) for label, kw in ABLATION_ROWS]


def grid_configs(base: ExperimentConfig, rules=("fedavg", "krum", "ztafl"), betas=(0.1, 0.2, 0.3)) -> list:
    out = []
    for rule in rules:
        for beta in betas:
            out.append(base.with_overrides(**{"name": f"{rule}_b{beta:g}", "aggregation.rule": rule,
                                              "attack.beta": beta}))
    return out

