"""Attack injectors: data and update poisoning, backdoors, identity attacks and adaptive attacks."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from .aggregation import ClientUpdate
from .attestation import AttestationToken, canonical_body, firmware_digest, id_hash
from .data import Dataset
from .errors import InvalidInputError
from .model import MlpModel, ParamVector, local_train, predict

logger = logging.getLogger(__name__)

ATTACK_KINDS = ("none", "label_flip", "grad_scale", "backdoor", "sybil", "replay",
                "shap_constrained", "slow_poison")
MAX_HALVINGS = 20


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "none"
    beta: float = 0.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise InvalidInputError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.beta < 0.5:
            raise InvalidInputError(f"beta={self.beta} outside [0, 0.5)")

    def get(self, key, default=None):
        return self.params.get(key, default)


def compromised_set(seed: int, beta: float, n_agents: int) -> frozenset:
    """``round(beta * n_agents)`` agent ids, a pure function of its arguments."""
    k = int(round(beta * n_agents))
    rng = np.random.default_rng([int(seed), 0xA77AC])
    return frozenset(int(i) for i in rng.choice(n_agents, size=k, replace=False))


def flip_map(y, n_classes: int) -> np.ndarray:
    return n_classes - 1 - np.asarray(y, dtype=np.int64)


def label_flip(shard: Dataset, p_flip: float, seed: int = 0, n_classes: Optional[int] = None) -> Dataset:
    """Relabel each sample ``c -> C-1-c`` independently with probability ``p_flip``."""
    if not 0.0 <= p_flip <= 1.0:
        raise InvalidInputError("p_flip must be in [0, 1]")
    C = n_classes or shard.n_classes
    rng = np.random.default_rng(seed)
    hit = rng.random(len(shard)) < p_flip
    y = shard.y.copy()
    y[hit] = flip_map(y[hit], C)
    return Dataset(shard.X.copy(), y, list(shard.class_names))


def grad_scale(update: ClientUpdate, alpha: float) -> ClientUpdate:
    return replace(update, delta=update.delta * alpha)


@dataclass(frozen=True)
class BackdoorTrigger:
    feature_indices: tuple
    trigger_value: float = 1.0
    target_class: int = 0

    def check(self, d: int):
        if any(not 0 <= j < d for j in self.feature_indices):
            raise InvalidInputError(f"trigger indices {self.feature_indices} outside [0, {d})")

    @classmethod
    def default(cls, d: int, target_class: int = 0, width: int = 4) -> "BackdoorTrigger":
        # last features: pure noise in the synthetic generator
        return cls(tuple(range(d - width, d)), 1.0, target_class)


def apply_trigger(X, trigger: BackdoorTrigger) -> np.ndarray:
    X = np.array(X, dtype=np.float64)
    trigger.check(X.shape[1])
    X[:, list(trigger.feature_indices)] = trigger.trigger_value
    return X


def backdoor_poison(shard: Dataset, trigger: BackdoorTrigger, rate: float = 0.1, seed: int = 0) -> Dataset:
    if not 0.0 < rate <= 1.0:
        raise InvalidInputError("rate must be in (0, 1]")
    n = len(shard)
    k = int(round(rate * n))
    idx = np.random.default_rng(seed).choice(n, size=k, replace=False)
    X, y = shard.X.copy(), shard.y.copy()
    X[idx] = apply_trigger(X[idx], trigger)
    y[idx] = trigger.target_class
    return Dataset(X, y, list(shard.class_names))


def measure_asr(model, clean_testset: Dataset, trigger: BackdoorTrigger) -> float:
    """Share of non-target test samples sent to the target class once triggered."""
    keep = clean_testset.y != trigger.target_class
    if not keep.any():
        return 0.0
    pred = predict(model, apply_trigger(clean_testset.X[keep], trigger))
    return float(np.mean(pred == trigger.target_class))


def sybil_forge(fake_id: str, now: int, pcr_digest: Optional[bytes] = None,
                key: Optional[Ed25519PrivateKey] = None, nonce: Optional[bytes] = None) -> AttestationToken:
    """A well-formed token for ``fake_id`` signed with a key the fog never registered.

    ``fake_id`` may be a registered name (impersonation) or a fresh one (Sybil identity).
    """
    key = key or Ed25519PrivateKey.generate()
    pcr = pcr_digest if pcr_digest is not None else firmware_digest(b"firmware-v1")
    nonce = nonce if nonce is not None else np.random.default_rng().bytes(16)
    idh = id_hash(fake_id)
    body = canonical_body(idh, int(now), pcr, nonce)
    return AttestationToken(idh, int(now), pcr, nonce, key.sign(body))


def replay_capture(token: AttestationToken) -> AttestationToken:
    """Byte-identical copy of an observed token."""
    return AttestationToken.from_bytes(token.to_bytes())


@dataclass(frozen=True, eq=False)
class ConstrainedResult:
    update: ClientUpdate
    drift: float
    halvings: int
    steps_taken: int


def shap_constrained_attack(model_t: MlpModel, shard: Dataset, constraint_tau: float,
                            importance: Callable, steps: int = 5, seed: int = 0, lr: float = 0.001,
                            batch_size: int = 128, phi_ref=None, n_classes: Optional[int] = None,
                            agent_id=None) -> ConstrainedResult:
    """Poison toward flipped labels while keeping ``||phi(theta) - phi_ref|| < constraint_tau``.

    Each step is one local epoch on the fully flipped shard. If the step breaks the
    constraint it is halved (up to 20 times); if still infeasible the attack stops.
    ``phi_ref`` defaults to ``importance(model_t)``.
    """
    if constraint_tau <= 0:
        raise InvalidInputError("constraint_tau must be > 0")
    C = n_classes or model_t.n_classes
    poisoned = label_flip(shard, 1.0, seed, C)
    phi0 = np.asarray(importance(model_t) if phi_ref is None else phi_ref, dtype=np.float64)
    bounded = np.isfinite(constraint_tau)
    cur = model_t
    cur_drift = float(np.linalg.norm(np.asarray(importance(cur)) - phi0)) if bounded else 0.0
    total_halvings, taken = 0, 0
    if cur_drift >= constraint_tau:
        logger.warning("constraint infeasible at the start; emitting a zero delta")
        zero = ClientUpdate(agent_id, model_t.params.zeros_like(), max(1, len(shard)))
        return ConstrainedResult(zero, cur_drift, 0, 0)
    for step in range(steps):
        trial = local_train(cur, poisoned, epochs=1, batch_size=batch_size, seed=seed + 101 * step, lr=lr)
        direction = trial.params - cur.params
        h = 1.0
        ok = False
        for halving in range(MAX_HALVINGS + 1):
            cand = cur.with_params(cur.params + direction * h)
            drift = float(np.linalg.norm(np.asarray(importance(cand)) - phi0)) if bounded else 0.0
            if drift < constraint_tau:
                ok = True
                break
            total_halvings += 1
            h *= 0.5
        if not ok:
            logger.debug("constrained attack stopped at step %d", step)
            break
        cur, cur_drift = cand, drift
        taken += 1
    assert cur_drift < constraint_tau
    upd = ClientUpdate(agent_id, cur.params - model_t.params, max(1, len(shard)))
    return ConstrainedResult(upd, cur_drift, total_halvings, taken)


def slow_poison_direction(n_params: int, direction_seed: int) -> np.ndarray:
    u = np.random.default_rng([int(direction_seed), 0x510]).standard_normal(n_params)
    return u / np.linalg.norm(u)


def slow_poison(round_t: int, honest_delta: ParamVector, alpha_per_round: float = 0.05,
                direction_seed: int = 0) -> ParamVector:
    """Honest delta plus a poison offset ``alpha * t * ||honest|| * u`` along a fixed unit ``u``.

    The offset grows by ``alpha`` (relative to the honest step) every round, so each
    round's change is small while the total keeps accumulating.
    """
    if not 0.0 <= alpha_per_round < 0.1:
        raise InvalidInputError("alpha_per_round must be in [0, 0.1)")
    if alpha_per_round == 0.0:
        return honest_delta
    u = slow_poison_direction(len(honest_delta), direction_seed)
    offset = alpha_per_round * round_t * honest_delta.norm() * u
    return honest_delta + ParamVector(offset, honest_delta.shape_tag)
