"""Edge-fog-cloud round protocol, experiment runner and run-directory writers."""
from __future__ import annotations

import csv
import json
import logging
import os
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import config as cfgmod
from .adversarial import EPS_GRID, AttackBudget, epoch_hook, fgsm, pgd
from .aggregation import (
    ClientUpdate,
    DriftTracker,
    fedavg,
    fltrust_cosine,
    fltrust_weights,
    geometric_median,
    krum,
    krum_select,
    shap_weighted_aggregate,
    trimmed_mean,
)
from .attestation import (
    AUDIT_COLUMNS,
    AgentIdentity,
    Reason,
    ReferenceRegistry,
    TrustDb,
    firmware_digest,
    issue_token,
    key_from_seed,
    register_firmware_update,
    sign_manifest,
    verify_token,
)
from .attribution import draw_background, model_importance, stability_score
from .config import ExperimentConfig
from .data import Dataset, PartitionSpec, generate_synthetic, load_csv, minmax_normalize, partition_noniid, split
from .errors import InvalidInputError
from .model import MlpModel, ParamVector, dequantize, evaluate, local_train, predict, quantize
from .threats import (
    BackdoorTrigger,
    backdoor_poison,
    compromised_set,
    label_flip,
    measure_asr,
    replay_capture,
    shap_constrained_attack,
    slow_poison,
    sybil_forge,
)

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ["round", "val_acc", "test_acc", "macro_f1", "asr", "robust_acc", "rolled_back",
                   "bytes_model", "bytes_attest", "filtered_count"]
FILTER_COLUMNS = ["round", "fog", "agent", "s_i", "mu_s", "sigma_s", "filtered", "reason", "weight"]
CHANNEL_COLUMNS = ["round", "link", "kind", "bytes"]
ATTACK_COLUMNS = ["round", "agent", "role", "delta_norm", "phi_drift", "constraint_tau"]
ROUND_MS = 1000
PENALIZED_REASONS = (Reason.BAD_SIGNATURE, Reason.STALE, Reason.PCR_MISMATCH)


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.6f}"


@dataclass(frozen=True)
class Topology:
    n_agents: int = 30
    n_fogs: int = 3

    def fog_of(self, agent: int) -> int:
        return agent % self.n_fogs

    def members(self, fog: int) -> list:
        return [a for a in range(self.n_agents) if a % self.n_fogs == fog]


class ChannelAccounting:
    """Byte counters per (link, kind); links are cloud->fog, fog->edge, edge->fog, fog->cloud."""

    def __init__(self):
        self.totals: dict = {}
        self.rows: list = []

    def add(self, rnd: int, link: str, kind: str, n: int):
        if n < 0:
            raise InvalidInputError("byte counts are nonnegative")
        key = (link, kind)
        self.totals[key] = self.totals.get(key, 0) + int(n)
        self.rows.append((rnd, link, kind, int(n)))

    def round_total(self, rnd: int, link: Optional[str] = None, kind: Optional[str] = None) -> int:
        return sum(n for r, l, k, n in self.rows
                   if r == rnd and (link is None or l == link) and (kind is None or k == kind))

    def collapsed(self) -> list:
        agg: dict = {}
        for r, l, k, n in self.rows:
            agg[(r, l, k)] = agg.get((r, l, k), 0) + n
        return [(r, l, k, n) for (r, l, k), n in sorted(agg.items())]


@dataclass
class FilterRow:
    round: int
    fog: int
    agent: int
    s_i: Optional[float]
    mu_s: Optional[float]
    sigma_s: Optional[float]
    filtered: bool
    reason: str
    weight: float

    def csv_row(self) -> list:
        return [self.round, self.fog, self.agent, _fmt(self.s_i), _fmt(self.mu_s), _fmt(self.sigma_s),
                _fmt(bool(self.filtered)), self.reason, _fmt(self.weight)]


@dataclass
class RoundRecord:
    round: int
    val_acc: float
    test_acc: float
    macro_f1: float
    asr: Optional[float]
    robust_acc: Optional[float]
    rolled_back: bool
    bytes_model: int
    bytes_attest: int
    filtered_count: int
    filter_rows: list = field(default_factory=list)
    trust: dict = field(default_factory=dict)
    bytes_down: int = 0
    fog_rolled_back: list = field(default_factory=list)
    drift_flagged: list = field(default_factory=list)

    def csv_row(self) -> list:
        return [self.round, _fmt(self.val_acc), _fmt(self.test_acc), _fmt(self.macro_f1), _fmt(self.asr),
                _fmt(self.robust_acc), _fmt(bool(self.rolled_back)), self.bytes_model, self.bytes_attest,
                self.filtered_count]


@dataclass
class FogContext:
    fog: int
    registry: ReferenceRegistry
    background: np.ndarray
    eval_X: np.ndarray
    eval_y: np.ndarray
    root: Dataset


def agent_name(i: int) -> str:
    return f"agent-{i:03d}"


def prepare_data(cfg: ExperimentConfig):
    """Generate (or load), split 70/15/15 and min-max normalize with train-fitted bounds."""
    d = cfg.data
    if d.csv_path:
        full = load_csv(d.csv_path, d.label_column)
    else:
        full = generate_synthetic(d.n_samples, d.n_features, d.n_classes, seed=_seed(cfg.seed, 1))
    train, val, test = split(full, (0.7, 0.15, 0.15), seed=_seed(cfg.seed, 2))
    (train, val, test), _ = minmax_normalize(train, val, test)
    return train, val, test


class Simulation:
    """One seeded run of the round protocol. Every source of randomness derives from the seed."""

    def __init__(self, cfg: ExperimentConfig, update_hook: Optional[Callable] = None):
        self.cfg = cfg.validate()
        self.seed = int(cfg.seed)
        self.update_hook = update_hook
        self.topology = Topology(cfg.topology.n_agents, cfg.topology.n_fogs)
        self.train, self.val, self.test = prepare_data(cfg)
        C = self.train.n_classes
        d = self.train.n_features
        p = cfg.partition
        groups = tuple(tuple(g) for g in p.feature_skew_groups) if p.feature_skew_groups else None
        spec = PartitionSpec(cfg.topology.n_agents, p.classes_per_agent, p.power_exponent, p.min_size,
                             p.max_size, p.label_skew, p.quantity_skew, groups, p.holdout_frac)
        self.shards = partition_noniid(self.train, spec, seed=_seed(self.seed, 3))
        dims = (d, *cfg.model.hidden, C)
        self.model = MlpModel.init(dims, seed=_seed(self.seed, 4))
        self.attack = cfg.attack
        self.compromised = (compromised_set(self.seed, cfg.attack.beta, cfg.topology.n_agents)
                            if cfg.attack.kind != "none" else frozenset())
        self.trigger = None
        if cfg.attack.kind == "backdoor":
            self.trigger = BackdoorTrigger.default(d, int(cfg.attack.params.get("target_class", 0)))
        self.train_sets = [self._poisoned_train(s) for s in self.shards]
        self.budget = (AttackBudget.fgsm(cfg.adversarial.eps) if cfg.adversarial.steps == 1
                       else AttackBudget.pgd(cfg.adversarial.eps, cfg.adversarial.steps))

        # attestation state
        self.manufacturer = key_from_seed(f"{self.seed}:manufacturer")
        nonce_rng = random.Random(_seed(self.seed, 5))
        self._nonce = lambda n: nonce_rng.getrandbits(8 * n).to_bytes(n, "big")
        self.identities = [
            AgentIdentity.create(agent_name(i), b"firmware-v1", f"{self.seed}:agent:{i}", self._nonce)
            for i in range(cfg.topology.n_agents)
        ]
        self.trust = TrustDb(cfg.attestation.tau_min)
        self.fogs = []
        for f in range(cfg.topology.n_fogs):
            reg = ReferenceRegistry(self.manufacturer.public_key(), cfg.attestation.dt_max_ms)
            for i in self.topology.members(f):
                ident = self.identities[i]
                reg.register(ident.agent_id, ident.public_key, ident.pcr_state)
            bg = draw_background(self.val.X, cfg.shap.background_size, seed=_seed(self.seed, 6, f)).samples
            er = np.random.default_rng(_seed(self.seed, 7, f))
            ev = np.sort(er.choice(len(self.val), size=min(cfg.shap.eval_samples, len(self.val)), replace=False))
            n_root = max(1, int(round(cfg.aggregation.root_frac * len(self.val))))
            root_idx = np.sort(np.random.default_rng(_seed(self.seed, 8, f)).choice(
                len(self.val), size=n_root, replace=False))
            self.fogs.append(FogContext(f, reg, bg, self.val.X[ev], self.val.y[ev], self.val.subset(root_idx)))
        for i in range(cfg.topology.n_agents):
            self.trust.record(agent_name(i))

        self.channels = ChannelAccounting()
        self.drift = DriftTracker(cfg.shap.drift_factor)
        self.drift_first_alarm: dict = {}
        self.records: list = []
        self.round = 0
        self.prev_val_acc = evaluate(self.model, self.val).accuracy
        # each fog guards against its own previous output, not the cloud average
        self.fog_prev_acc = [self.prev_val_acc] * cfg.topology.n_fogs
        self.captured: list = []
        # (round, agent, role, ||delta||, phi drift, tau) for every compromised submission
        self.attack_log: list = []
        self.fw_schedule = {}
        for r, a in cfg.attestation.firmware_updates:
            self.fw_schedule.setdefault(int(r), []).append(int(a))

    # -- attack roles -------------------------------------------------------------------
    def role(self, agent: int) -> str:
        return self.attack.kind if agent in self.compromised else "honest"

    def _poisoned_train(self, shard) -> Dataset:
        a = shard.agent_id
        if a not in self.compromised:
            return shard.train
        k, prm = self.attack.kind, self.attack.params
        if k == "label_flip":
            return label_flip(shard.train, float(prm.get("p_flip", 1.0)), _seed(self.seed, 20, a),
                              self.train.n_classes)
        if k == "backdoor":
            return backdoor_poison(shard.train, self.trigger, float(prm.get("rate", 0.1)), _seed(self.seed, 21, a))
        return shard.train

    # -- attribution ------------------------------------------------------------------
    def importance(self, fog: FogContext, model: MlpModel) -> np.ndarray:
        return model_importance(model, fog.eval_X, fog.eval_y, fog.background, self.cfg.shap.m_steps).phi

    # -- round protocol -----------------------------------------------------------------
    def _attest(self, fog: FogContext, agent: int, now: int):
        ident = self.identities[agent]
        tok = issue_token(ident, now)
        self.channels.add(self.round, "edge->fog", "attest", tok.wire_bytes(self.cfg.attestation.sealed))
        if self.attack.kind == "replay" and agent not in self.compromised:
            self.captured.append((fog.fog, tok))
        return verify_token(tok, fog.registry, self.trust, now)

    def _injected_tokens(self, fog: FogContext, now: int) -> list:
        """Sybil and replay traffic from compromised agents, verified after genuine tokens."""
        out = []
        attackers = [a for a in self.topology.members(fog.fog) if a in self.compromised]
        if self.attack.kind == "sybil":
            per = int(self.attack.params.get("fakes_per_attacker", 2))
            for a in attackers:
                for j in range(per):
                    fake = f"sybil-{a:03d}-{j}"
                    key = key_from_seed(f"{self.seed}:sybil:{a}:{j}")
                    out.append((a, fake, sybil_forge(fake, now, self.identities[a].pcr_state, key,
                                                    self._nonce(16))))
        elif self.attack.kind == "replay" and attackers:
            for fog_id, tok in self.captured:
                if fog_id == fog.fog:
                    out.append((attackers[0], "replayed", replay_capture(tok)))
        return out

    def _train_agent(self, agent: int, fog: FogContext, base: MlpModel) -> ParamVector:
        cfg = self.cfg
        role = self.role(agent)
        seed = _seed(self.seed, 30, self.round, agent)
        data = self.train_sets[agent]
        if role == "shap_constrained":
            prm = self.attack.params
            res = shap_constrained_attack(
                base, data, float(prm.get("constraint_tau", 0.05)),
                lambda m: self.importance(fog, m), steps=int(prm.get("steps", 5)), seed=seed,
                lr=cfg.train.lr, batch_size=cfg.train.batch_size, n_classes=self.train.n_classes,
                agent_id=agent)
            self.attack_log.append((self.round, agent, role, res.update.delta.norm(), res.drift,
                                    float(prm.get("constraint_tau", 0.05))))
            return res.update.delta
        hook = None
        if cfg.adversarial.enabled and cfg.adversarial.ratio > 0:
            hook = epoch_hook(cfg.adversarial.ratio, self.budget, seed + 1)
        trained = local_train(base, data, cfg.train.local_epochs, cfg.train.batch_size, seed, cfg.train.lr, hook)
        delta = trained.params - base.params
        if role == "grad_scale":
            delta = delta * float(self.attack.params.get("alpha", 5.0))
        elif role == "slow_poison":
            # colluders share one direction
            delta = slow_poison(self.round, delta, float(self.attack.params.get("per_round_alpha", 0.05)),
                                direction_seed=self.seed)
        if role != "honest":
            self.attack_log.append((self.round, agent, role, delta.norm(), None, None))
        return delta

    def _upload(self, delta: ParamVector) -> ParamVector:
        if self.cfg.quantize:
            q = quantize(delta)
            self.channels.add(self.round, "edge->fog", "model", q.wire_bytes())
            return dequantize(q)
        self.channels.add(self.round, "edge->fog", "model", delta.wire_bytes())
        return delta

    def _aggregate_fog(self, fog: FogContext, base: MlpModel, updates: list, rows: list):
        """Returns (fog params, accepted sample count, rolled_back)."""
        cfg = self.cfg
        rule = cfg.aggregation.rule
        if not updates:
            return base.params, 0, False
        n_total = sum(u.n_samples for u in updates)
        if rule == "ztafl":
            phi_ref = self.importance(fog, base)
            scored = []
            for u in updates:
                phi = self.importance(fog, base.apply_delta(u.delta))
                st = stability_score(phi, phi_ref, cfg.shap.eps, u.agent_id)
                self.drift.update(u.agent_id, phi)
                scored.append(ClientUpdate(u.agent_id, u.delta, u.n_samples, u.fog_accuracy, True, st, phi))
            out = shap_weighted_aggregate(scored, phi_ref, base, self.fog_prev_acc[fog.fog], self.val,
                                          k_sigma=cfg.aggregation.k_sigma,
                                          rollback_fraction=cfg.aggregation.rollback_fraction)
            mu = out.stats.mu if out.stats else None
            sd = out.stats.sigma if out.stats else None
            for u in scored:
                filt = u.agent_id in out.filtered
                rows.append(FilterRow(self.round, fog.fog, u.agent_id, u.stability.s, mu, sd, filt,
                                      out.filtered.get(u.agent_id, ""), out.weights.get(u.agent_id, 0.0)))
                name = agent_name(u.agent_id)
                if filt:
                    self.trust.penalize(name, "shap-filter")
                else:
                    self.trust.success(name, mu is not None and u.stability.s > mu)
            if out.stats is not None and out.stats.blind_spot:
                self.trust.note(agent_name(scored[0].agent_id), "blind-spot", f"fog={fog.fog} size={out.stats.size}")
            accepted = sum(u.n_samples for u in scored if out.weights.get(u.agent_id, 0.0) > 0)
            if out.rolled_back:
                # a rolled-back fog hands theta^t back; it still counts at the cloud
                return base.params, (0 if out.reason == "empty-cohort" else accepted), True
            self.fog_prev_acc[fog.fog] = out.candidate_acc
            return out.new_params, accepted, False
        if rule == "fedavg":
            new = fedavg(updates, base.params)
            weights = {u.agent_id: u.n_samples / n_total for u in updates}
        elif rule == "krum":
            f = min(cfg.aggregation.krum_f, max(0, (len(updates) - 3) // 2))
            if len(updates) < 3:
                new = fedavg(updates, base.params)
                weights = {u.agent_id: u.n_samples / n_total for u in updates}
            else:
                chosen = krum_select(updates, f)
                new = krum(updates, f, base.params)
                weights = {u.agent_id: float(u.agent_id == chosen.agent_id) for u in updates}
        elif rule == "trimmed_mean":
            k = int(np.floor(cfg.aggregation.trim_frac * len(updates)))
            frac = cfg.aggregation.trim_frac if 2 * k < len(updates) else 0.0
            new = trimmed_mean(updates, frac, base.params)
            weights = {u.agent_id: 1.0 / len(updates) for u in updates}
        elif rule == "geomed":
            new = geometric_median(updates, base.params)
            weights = {u.agent_id: 1.0 / len(updates) for u in updates}
        elif rule == "fltrust":
            root_model = local_train(base, fog.root, cfg.train.local_epochs, cfg.train.batch_size,
                                     _seed(self.seed, 40, self.round, fog.fog), cfg.train.lr)
            root_delta = root_model.params - base.params
            w = fltrust_weights(updates, root_delta)
            new = fltrust_cosine(updates, root_delta, base.params)
            tot = w.sum()
            ups = sorted(updates, key=lambda u: u.agent_id)
            weights = {u.agent_id: (float(wi / tot) if tot > 0 else 0.0) for u, wi in zip(ups, w)}
        else:
            raise InvalidInputError(f"unknown rule {rule}")
        for u in sorted(updates, key=lambda u: u.agent_id):
            rows.append(FilterRow(self.round, fog.fog, u.agent_id, None, None, None, False, "", weights[u.agent_id]))
        return new, n_total, False

    def _firmware_updates(self):
        for a in self.fw_schedule.get(self.round, []):
            ident = self.identities[a]
            image = f"firmware-v2:{a}:{self.round}".encode()
            digest = firmware_digest(image)
            manifest = sign_manifest(self.manufacturer, ident.agent_id, digest)
            ok = register_firmware_update(self.fogs[self.topology.fog_of(a)].registry, manifest)
            if ok:
                ident.pcr_state = digest
            self.trust.note(ident.agent_id, "firmware-update", "accepted" if ok else "rejected")

    def run_round(self) -> RoundRecord:
        cfg = self.cfg
        self.round += 1
        self.trust.round = self.round
        now = self.round * ROUND_MS
        base = self.model
        self.captured = []
        self._firmware_updates()
        rows: list = []
        fog_results = []
        fog_rb = []
        for fog in self.fogs:
            self.channels.add(self.round, "cloud->fog", "model", base.params.wire_bytes())
            updates = []
            for a in self.topology.members(fog.fog):
                name = agent_name(a)
                if not self.trust.is_active(name):
                    if cfg.attestation.enabled:
                        verdict = self._attest(fog, a, now)
                        valid = verdict.attestation_valid
                    else:
                        valid = True
                    self.trust.quarantine_step(name, valid)
                    rows.append(FilterRow(self.round, fog.fog, a, None, None, None, True, "quarantined", 0.0))
                    continue
                if cfg.attestation.enabled:
                    verdict = self._attest(fog, a, now)
                    if not verdict.accepted:
                        reason = verdict.reason.value
                        if verdict.reason in PENALIZED_REASONS:
                            self.trust.penalize(name, f"attestation:{reason}")
                        else:
                            self.trust.note(name, "reject", reason)
                        rows.append(FilterRow(self.round, fog.fog, a, None, None, None, True, reason, 0.0))
                        continue
                self.channels.add(self.round, "fog->edge", "model", base.params.wire_bytes())
                delta = self._train_agent(a, fog, base)
                if self.update_hook is not None:
                    delta = self.update_hook(self, a, delta)
                delta = self._upload(delta)
                acc = evaluate(base.apply_delta(delta), self.val).accuracy
                updates.append(ClientUpdate(a, delta, len(self.train_sets[a]), acc, True))
            if cfg.attestation.enabled:
                for a, claimed, tok in self._injected_tokens(fog, now):
                    self.channels.add(self.round, "edge->fog", "attest", tok.wire_bytes(cfg.attestation.sealed))
                    verdict = verify_token(tok, fog.registry, self.trust, now)
                    assert not verdict.accepted, "injected token accepted"
                    self.trust.note(agent_name(a), "injected-token", f"{claimed}:{verdict.reason.value}")
            params, accepted, rb = self._aggregate_fog(fog, base, updates, rows)
            fog_rb.append(rb)
            fog_results.append((params, accepted))
            if accepted > 0:
                self.channels.add(self.round, "fog->cloud", "model", params.wire_bytes())

        total = sum(n for _, n in fog_results)
        rolled_back = False
        if total == 0:
            new_model = base
            rolled_back = True
        else:
            # theta^t + sum_f w_f (theta_f - theta^t): fogs returning theta^t add exactly zero
            step = np.zeros(len(base.params))
            for params, n in fog_results:
                if n > 0:
                    step += (n / total) * (params.values - base.params.values)
            new_model = base.with_params(ParamVector(base.params.values + step, base.params.shape_tag))
            rolled_back = all(rb for rb, (_, n) in zip(fog_rb, fog_results) if n > 0)
        val = evaluate(new_model, self.val).accuracy
        if cfg.aggregation.rule == "ztafl" and not rolled_back and \
                val < cfg.aggregation.rollback_fraction * self.prev_val_acc:
            new_model, rolled_back = base, True
            val = evaluate(base, self.val).accuracy
        if rolled_back:
            assert new_model.params.equals(base.params)
        if cfg.aggregation.rule == "ztafl":
            assert val >= cfg.aggregation.rollback_fraction * self.prev_val_acc - 1e-12
        self.model = new_model
        self.prev_val_acc = val

        flagged = []
        if cfg.aggregation.rule == "ztafl":
            seen = sorted(r.agent for r in rows if r.s_i is not None)
            for a in sorted(self.drift.alarm(agents=seen)):
                flagged.append(a)
                if a not in self.drift_first_alarm:
                    self.drift_first_alarm[a] = self.round
                self.trust.note(agent_name(a), "drift-alarm", f"cumulative={self.drift.cumulative[a]:.6f}")

        test = evaluate(new_model, self.test)
        asr = measure_asr(new_model, self.test, self.trigger) if self.trigger is not None else None
        robust = None
        if self.round % cfg.robust_every == 0 or self.round == cfg.rounds:
            robust = robust_accuracy(new_model, self.test, cfg.robust_eps)
        rec = RoundRecord(
            self.round, val, test.accuracy, test.macro_f1, asr, robust, rolled_back,
            self.channels.round_total(self.round, "edge->fog", "model"),
            self.channels.round_total(self.round, kind="attest"),
            sum(1 for r in rows if r.filtered and r.reason == "stability-below-threshold"),
            rows, {agent_name(i): self.trust.tau(agent_name(i)) for i in range(cfg.topology.n_agents)},
            self.channels.round_total(self.round, "fog->edge", "model")
            + self.channels.round_total(self.round, "cloud->fog", "model"),
            fog_rb, flagged,
        )
        self.records.append(rec)
        return rec

    def run(self) -> list:
        while self.round < self.cfg.rounds:
            rec = self.run_round()
            logger.info("round %d val=%.4f test=%.4f rb=%s", rec.round, rec.val_acc, rec.test_acc, rec.rolled_back)
        return self.records

    def robustness_curve(self, eps_grid=(0.0,) + EPS_GRID) -> list:
        rows = []
        for eps in eps_grid:
            f = robust_accuracy(self.model, self.test, eps)
            p = robust_accuracy(self.model, self.test, eps, steps=10, seed=_seed(self.seed, 50))
            rows.append((eps, f, p))
        return rows


def robust_accuracy(model, testset, eps: float, steps: int = 1, seed: int = 0) -> float:
    if eps == 0:
        return float(np.mean(predict(model, testset.X) == testset.y))
    Xt = np.clip(testset.X, 0.0, 1.0)
    if steps == 1:
        X_adv = fgsm(model, Xt, testset.y, eps)
    else:
        X_adv = pgd(model, Xt, testset.y, AttackBudget.pgd(eps, steps), seed)
    return float(np.mean(predict(model, X_adv) == testset.y))


def convergence_round(records, frac: float = 0.95) -> int:
    """First round whose validation accuracy reaches ``frac`` of the final one."""
    if not records:
        raise InvalidInputError("need at least one round record")
    vals = [r.val_acc if hasattr(r, "val_acc") else float(r) for r in records]
    target = frac * vals[-1]
    for i, v in enumerate(vals):
        if v >= target:
            return (records[i].round if hasattr(records[i], "round") else i + 1)
    return len(vals)


@dataclass
class RunResult:
    run_dir: Optional[str]
    config: ExperimentConfig
    records: list
    compromised: frozenset
    drift_first_alarm: dict
    audit: list
    robustness: list
    channels: ChannelAccounting

    @property
    def final(self) -> RoundRecord:
        return self.records[-1]

    def filter_rows(self) -> list:
        return [r for rec in self.records for r in rec.filter_rows]


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(r)


def write_run(sim: Simulation, run_dir: str, robustness: list):
    os.makedirs(run_dir, exist_ok=True)
    cfgmod.save(sim.cfg, os.path.join(run_dir, "config.json"))
    _write_csv(os.path.join(run_dir, "metrics.csv"), METRICS_COLUMNS, [r.csv_row() for r in sim.records])
    _write_csv(os.path.join(run_dir, "filter.csv"), FILTER_COLUMNS,
               [row.csv_row() for r in sim.records for row in r.filter_rows])
    _write_csv(os.path.join(run_dir, "audit.csv"), AUDIT_COLUMNS, [e.csv_row() for e in sim.trust.audit])
    _write_csv(os.path.join(run_dir, "channels.csv"), CHANNEL_COLUMNS, sim.channels.collapsed())
    _write_csv(os.path.join(run_dir, "robustness.csv"), ["eps", "fgsm_acc", "pgd_acc"],
               [[_fmt(e), _fmt(f), _fmt(p)] for e, f, p in robustness])
    _write_csv(os.path.join(run_dir, "roles.csv"), ["agent", "fog", "role", "n_samples", "drift_first_alarm"],
               [[a, sim.topology.fog_of(a), sim.role(a), len(sim.train_sets[a]),
                 sim.drift_first_alarm.get(a, "")] for a in range(sim.topology.n_agents)])
    _write_csv(os.path.join(run_dir, "attacks.csv"), ATTACK_COLUMNS,
               [[r, a, role, _fmt(n), "" if d is None else f"{d:.12g}", _fmt(t)] for r, a, role, n, d, t in sim.attack_log])
    final = sim.records[-1]
    summary = {
        "name": sim.cfg.name,
        "seed": sim.seed,
        "rule": sim.cfg.aggregation.rule,
        "attack": sim.cfg.attack.kind,
        "beta": sim.cfg.attack.beta,
        "final_val_acc": round(final.val_acc, 6),
        "final_test_acc": round(final.test_acc, 6),
        "final_macro_f1": round(final.macro_f1, 6),
        "final_asr": None if final.asr is None else round(final.asr, 6),
        "final_robust_acc": None if final.robust_acc is None else round(final.robust_acc, 6),
        "convergence_round": convergence_round(sim.records),
        "convergence_definition": "first round with val_acc >= 0.95 x final val_acc",
    }
    with open(os.path.join(run_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None, update_hook=None,
                   robustness: bool = True) -> RunResult:
    """Run one seeded experiment; with ``out_dir`` also write the run directory."""
    sim = Simulation(cfg, update_hook)
    sim.run()
    curve = sim.robustness_curve() if robustness else []
    run_dir = None
    if out_dir is not None:
        run_dir = os.path.join(out_dir, f"{cfg.name}_seed{cfg.seed}")
        try:
            write_run(sim, run_dir, curve)
        except OSError as exc:
            raise InvalidInputError(f"cannot write run directory {run_dir}: {exc}") from exc
    return RunResult(run_dir, cfg, sim.records, sim.compromised, dict(sim.drift_first_alarm),
                     list(sim.trust.audit), curve, sim.channels)


def run_seeds(cfg: ExperimentConfig, seeds=None, out_dir: Optional[str] = None) -> list:
    seeds = list(cfg.seeds if seeds is None else seeds)
    results = []
    for s in seeds:
        results.append(run_experiment(cfg.with_overrides(seed=int(s)), out_dir))
    if out_dir is not None:
        write_summary(cfg, results, os.path.join(out_dir, f"{cfg.name}_summary.csv"))
    return results


SUMMARY_METRICS = ("final_test_acc", "final_macro_f1", "final_asr", "final_robust_acc", "convergence_round")


def summarize(results) -> dict:
    """Mean and population std of the final-round metrics over seeds."""
    cols = {
        "final_test_acc": [r.final.test_acc for r in results],
        "final_macro_f1": [r.final.macro_f1 for r in results],
        "final_asr": [r.final.asr for r in results if r.final.asr is not None],
        "final_robust_acc": [r.final.robust_acc for r in results if r.final.robust_acc is not None],
        "convergence_round": [convergence_round(r.records) for r in results],
    }
    out = {}
    for k, v in cols.items():
        if v:
            out[k] = (float(np.mean(v)), float(np.std(v)))
    return out


def write_summary(cfg, results, path):
    s = summarize(results)
    rows = [[k, _fmt(m), _fmt(sd), f"{100 * m:.1f} ± {100 * sd:.1f}" if k != "convergence_round"
             else f"{m:.1f} ± {sd:.1f}"] for k, (m, sd) in s.items()]
    _write_csv(path, ["metric", "mean", "std", "formatted"], rows)


SWEEP_COLUMNS = ["config", "rule", "attack", "beta", "seeds", "test_acc_mean", "test_acc_std",
                 "asr_mean", "robust_acc_mean", "convergence_round_mean"]


def sweep(configs, out_dir: str, seeds=None) -> list:
    """Run every config over its seeds; write ``comparison.csv`` with one row per config."""
    os.makedirs(out_dir, exist_ok=True)
    table = []
    for cfg in configs:
        res = run_seeds(cfg, seeds, out_dir)
        s = summarize(res)
        table.append([cfg.name, cfg.aggregation.rule, cfg.attack.kind, _fmt(cfg.attack.beta), len(res),
                      _fmt(s["final_test_acc"][0]), _fmt(s["final_test_acc"][1]),
                      _fmt(s["final_asr"][0]) if "final_asr" in s else "",
                      _fmt(s["final_robust_acc"][0]) if "final_robust_acc" in s else "",
                      _fmt(s["convergence_round"][0])])
    _write_csv(os.path.join(out_dir, "comparison.csv"), SWEEP_COLUMNS, table)
    return table
