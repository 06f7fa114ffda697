"""Aggregation rules over client deltas, including the stability-weighted rule with rollback.

Every rule takes the base parameters ``theta^t`` and a list of :class:`ClientUpdate`
objects and returns new parameters. Updates are first sorted by ``agent_id`` so results
never depend on arrival order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .attribution import CohortStats, StabilityScore, cohort_threshold, stability_score
from .errors import InvalidInputError, ShapeError
from .model import MlpModel, ParamVector, evaluate

logger = logging.getLogger(__name__)

ROLLBACK_FRACTION = 0.8
WEIGHT_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class ClientUpdate:
    agent_id: object
    delta: ParamVector
    n_samples: int
    fog_accuracy: float = 1.0
    attested: bool = True
    stability: Optional[StabilityScore] = None
    phi: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.n_samples < 1:
            raise InvalidInputError(f"agent {self.agent_id}: n_samples must be >= 1")
        if not 0.0 <= self.fog_accuracy <= 1.0:
            raise InvalidInputError(f"agent {self.agent_id}: fog_accuracy outside [0, 1]")


def _sorted(updates) -> list:
    ups = sorted(updates, key=lambda u: u.agent_id)
    if not ups:
        raise InvalidInputError("no updates to aggregate")
    tag, n = ups[0].delta.shape_tag, len(ups[0].delta)
    for u in ups[1:]:
        if u.delta.shape_tag != tag or len(u.delta) != n:
            raise ShapeError(f"agent {u.agent_id}: delta shape differs from the cohort")
    return ups


def _stack(ups) -> np.ndarray:
    return np.stack([u.delta.values for u in ups])


def _apply(base: Optional[ParamVector], delta: np.ndarray, tag) -> ParamVector:
    d = ParamVector(delta, tag)
    return d if base is None else base + d


def fedavg(updates, base: Optional[ParamVector] = None) -> ParamVector:
    """Sample-weighted mean delta added to ``base`` (``base=None`` returns the delta)."""
    ups = _sorted(updates)
    n = np.array([u.n_samples for u in ups], dtype=np.float64)
    w = n / n.sum()
    return _apply(base, w @ _stack(ups), ups[0].delta.shape_tag)


def krum_scores(deltas: np.ndarray, f: int) -> np.ndarray:
    n = deltas.shape[0]
    sq = np.sum(deltas ** 2, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * deltas @ deltas.T, 0.0)
    m = n - f - 2
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(d2[i], i))
        scores[i] = others[:m].sum()
    return scores


def krum_select(updates, f: int):
    """The update minimizing the summed squared distance to its ``n - f - 2`` nearest peers."""
    ups = _sorted(updates)
    if len(ups) < 2 * f + 3:
        raise InvalidInputError(f"krum needs at least 2f+3={2 * f + 3} updates, got {len(ups)}")
    scores = krum_scores(_stack(ups), f)
    # argmin returns the first minimum, i.e. the lowest agent_id among ties
    return ups[int(np.argmin(scores))]


def krum(updates, f: int, base: Optional[ParamVector] = None) -> ParamVector:
    chosen = krum_select(updates, f)
    return _apply(base, chosen.delta.values, chosen.delta.shape_tag)


def trimmed_mean(updates, trim_frac: float, base: Optional[ParamVector] = None) -> ParamVector:
    """Per-coordinate mean after dropping the ``floor(trim_frac * n)`` largest and smallest."""
    ups = _sorted(updates)
    n = len(ups)
    k = int(np.floor(trim_frac * n))
    if trim_frac < 0 or 2 * k >= n:
        raise InvalidInputError(f"trim_frac={trim_frac} trims {2 * k} of {n} updates")
    s = np.sort(_stack(ups), axis=0)
    return _apply(base, s[k:n - k].mean(axis=0), ups[0].delta.shape_tag)


@dataclass(frozen=True, eq=False)
class MedianResult:
    point: np.ndarray
    objective: float
    iterations: int
    converged: bool


def gm_objective(z, points) -> float:
    return float(np.linalg.norm(points - z, axis=1).sum())


def weiszfeld(points, tol: float = 1e-9, max_iter: int = 1000, anchor_tol: float = 1e-12) -> MedianResult:
    """Weiszfeld iteration with the Vardi-Zhang step at input points.

    Starts from the best of the mean and the inputs. When the iterate sits on an input
    (within ``anchor_tol``), that input's term is dropped from the Weiszfeld map and the
    step is shrunk by ``max(0, 1 - 1/||R||)`` toward the anchor, which also detects when
    the anchor itself is optimal.
    """
    P = np.atleast_2d(np.asarray(points, dtype=np.float64))
    mean = P.mean(axis=0)
    cands = [mean] + list(P)
    objs = [gm_objective(c, P) for c in cands]
    z = cands[int(np.argmin(objs))].copy()
    best, best_obj = z.copy(), min(objs)
    for it in range(1, max_iter + 1):
        dist = np.linalg.norm(P - z, axis=1)
        at = dist <= anchor_tol
        far = ~at
        if not far.any():
            return MedianResult(z, gm_objective(z, P), it, True)
        inv = 1.0 / dist[far]
        T = (inv[:, None] * P[far]).sum(axis=0) / inv.sum()
        if at.any():
            R = (inv[:, None] * (P[far] - z)).sum(axis=0)
            rn = np.linalg.norm(R)
            eta = float(at.sum())
            if rn <= eta:
                # the anchor point is the median
                return MedianResult(z, gm_objective(z, P), it, True)
            gamma = eta / rn
            z_new = (1.0 - gamma) * T + gamma * z
        else:
            z_new = T
        obj = gm_objective(z_new, P)
        if obj < best_obj:
            best, best_obj = z_new.copy(), obj
        step = np.linalg.norm(z_new - z)
        z = z_new
        if step <= tol * max(1.0, np.linalg.norm(z)):
            return MedianResult(best, best_obj, it, True)
    logger.warning("geometric median did not converge in %d iterations", max_iter)
    return MedianResult(best, best_obj, max_iter, False)


def geometric_median(updates, base: Optional[ParamVector] = None, tol: float = 1e-9,
                     max_iter: int = 1000) -> ParamVector:
    ups = _sorted(updates)
    res = weiszfeld(_stack(ups), tol, max_iter)
    return _apply(base, res.point, ups[0].delta.shape_tag)


def fltrust_weights(updates, root_delta: ParamVector) -> np.ndarray:
    ups = _sorted(updates)
    r = root_delta.values
    rn = np.linalg.norm(r)
    if rn == 0:
        raise InvalidInputError("root update is zero")
    D = _stack(ups)
    norms = np.linalg.norm(D, axis=1)
    cos = np.where(norms > 0, D @ r / (np.where(norms > 0, norms, 1.0) * rn), 0.0)
    w = np.maximum(cos, 0.0)
    w[np.abs(cos) < 1e-12] = 0.0
    return w


def fltrust_cosine(updates, root_delta: ParamVector, base: Optional[ParamVector] = None) -> ParamVector:
    """Clipped-cosine trust weights against the root delta; deltas rescaled to its norm."""
    ups = _sorted(updates)
    w = fltrust_weights(ups, root_delta)
    tag = ups[0].delta.shape_tag
    if w.sum() == 0:
        return _apply(base, np.zeros(len(root_delta)), tag)
    D = _stack(ups)
    norms = np.linalg.norm(D, axis=1)
    scaled = D * (root_delta.norm() / np.where(norms > 0, norms, 1.0))[:, None]
    return _apply(base, (w @ scaled) / w.sum(), tag)


@dataclass(eq=False)
class AggregationOutcome:
    new_params: ParamVector
    weights: dict
    filtered: dict
    rolled_back: bool
    reason: str = ""
    stats: Optional[CohortStats] = None
    scores: dict = field(default_factory=dict)
    candidate_acc: float = float("nan")
    val_acc: float = float("nan")


def zta_weights(scores, accs, sizes) -> np.ndarray:
    base = np.asarray(accs, dtype=np.float64) * np.sqrt(np.asarray(sizes, dtype=np.float64))
    raw = np.maximum(np.asarray(scores, dtype=np.float64), 0.0) * base
    tot = raw.sum()
    if tot <= 0:
        # every survivor clamped to zero (e.g. against a near-zero reference): drop the s factor
        raw = base if base.sum() > 0 else np.ones_like(base)
        tot = raw.sum()
    return raw / tot


def shap_weighted_aggregate(updates, phi_ref, prev_global: MlpModel, prev_val_acc: float, fog_valset,
                            importance: Optional[Callable] = None, k_sigma: float = 2.0,
                            rollback_fraction: float = ROLLBACK_FRACTION) -> AggregationOutcome:
    """Stability filter, ``max(s,0) * acc * sqrt(n)`` weighting and the rollback guard.

    Updates without a precomputed ``stability`` are scored via ``importance(model)``.
    The returned model's accuracy on ``fog_valset`` is never below
    ``rollback_fraction * prev_val_acc``.
    """
    ups = _sorted(updates)
    for u in ups:
        if not u.attested:
            raise InvalidInputError(f"agent {u.agent_id} was never admitted (not attested)")
    base = prev_global.params
    scores = {}
    for u in ups:
        if u.stability is not None:
            scores[u.agent_id] = u.stability.s
        else:
            if importance is None:
                raise InvalidInputError("no stability score and no importance function")
            phi = importance(prev_global.apply_delta(u.delta))
            scores[u.agent_id] = stability_score(phi, phi_ref, agent_id=u.agent_id).s
    s = np.array([scores[u.agent_id] for u in ups])
    filtered = {}
    stats = None
    if len(ups) >= 2:
        stats = cohort_threshold(s, k_sigma)
        for u, si in zip(ups, s):
            if si < stats.threshold:
                filtered[u.agent_id] = "stability-below-threshold"
    survivors = [u for u in ups if u.agent_id not in filtered]
    if not survivors:
        return AggregationOutcome(base, {u.agent_id: 0.0 for u in ups}, filtered, True,
                                  "empty-cohort", stats, scores, float("nan"), prev_val_acc)
    w = zta_weights([scores[u.agent_id] for u in survivors], [u.fog_accuracy for u in survivors],
                    [u.n_samples for u in survivors])
    assert abs(w.sum() - 1.0) <= WEIGHT_TOL
    weights = {u.agent_id: 0.0 for u in ups}
    for u, wi in zip(survivors, w):
        weights[u.agent_id] = float(wi)
    delta = w @ _stack(survivors)
    candidate = prev_global.apply_delta(ParamVector(delta, base.shape_tag))
    cand_acc = evaluate(candidate, fog_valset).accuracy
    if cand_acc < rollback_fraction * prev_val_acc:
        logger.info("rollback: candidate accuracy %.4f < %.2f x %.4f", cand_acc, rollback_fraction,
                    prev_val_acc)
        return AggregationOutcome(base, weights, filtered, True, "accuracy-drop", stats, scores,
                                  cand_acc, prev_val_acc)
    return AggregationOutcome(candidate.params, weights, filtered, False, "", stats, scores,
                              cand_acc, cand_acc)


class DriftTracker:
    """Per-agent running sum of successive attribution-vector changes."""

    def __init__(self, factor: float = 3.0):
        self.factor = factor
        self.prev: dict = {}
        self.cumulative: dict = {}

    def update(self, agent, phi) -> float:
        phi = np.asarray(phi, dtype=np.float64).copy()
        if agent in self.prev:
            self.cumulative[agent] += float(np.linalg.norm(phi - self.prev[agent]))
        else:
            self.cumulative[agent] = 0.0
        self.prev[agent] = phi
        return self.cumulative[agent]

    def default_threshold(self, agents=None) -> float:
        agents = list(self.cumulative) if agents is None else list(agents)
        if not agents:
            return float("inf")
        return self.factor * float(np.median([self.cumulative[a] for a in agents]))

    def alarm(self, threshold: Optional[float] = None, agents=None) -> set:
        pool = list(self.cumulative) if agents is None else [a for a in agents if a in self.cumulative]
        thr = self.default_threshold(pool) if threshold is None else threshold
        return {a for a in pool if self.cumulative[a] > thr}


def drift_update(tracker: DriftTracker, agent, phi_t) -> float:
    return tracker.update(agent, phi_t)


def drift_alarm(tracker: DriftTracker, threshold: Optional[float] = None, agents=None) -> set:
    """Agents whose cumulative drift exceeds ``threshold`` (default: factor x cohort median)."""
    return tracker.alarm(threshold, agents)


def with_stability(update: ClientUpdate, score: StabilityScore, phi=None) -> ClientUpdate:
    return replace(update, stability=score, phi=phi)
