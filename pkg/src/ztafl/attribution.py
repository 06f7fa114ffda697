"""Feature attribution and SHAP stability scoring.

Attribution engines work on any *scorer*: an object with ``score(X, targets)`` returning
one real per row and ``score_grad(X, targets)`` returning the per-row input gradient.
:class:`ztafl.model.MlpModel` scores a row by the softmax probability of the target class.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from math import factorial

import numpy as np

from .errors import InvalidInputError, ShapeError

logger = logging.getLogger(__name__)

MAX_EXACT_FEATURES = 12
STABILITY_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class BackgroundSet:
    samples: np.ndarray
    seed: int = 0

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if s.shape[0] < 1:
            raise InvalidInputError("background needs at least one sample")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.shape[0]


def draw_background(X, size: int = 100, seed: int = 0) -> BackgroundSet:
    """Random rows of ``X``; without replacement whenever ``X`` has enough rows."""
    X = np.asarray(X, dtype=np.float64)
    rng = np.random.default_rng(seed)
    idx = rng.choice(X.shape[0], size=size, replace=X.shape[0] < size)
    return BackgroundSet(X[np.sort(idx)], seed)


@dataclass(frozen=True, eq=False)
class AttributionVector:
    phi: np.ndarray
    basis: str
    eval_count: int = 1

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=np.float64).reshape(-1)
        if not np.isfinite(phi).all():
            raise InvalidInputError("attribution must be finite")
        object.__setattr__(self, "phi", phi)

    def __len__(self):
        return self.phi.size


def _bg(background) -> np.ndarray:
    if isinstance(background, BackgroundSet):
        return background.samples
    return np.atleast_2d(np.asarray(background, dtype=np.float64))


def _coalition_values(scorer, x, bg, masks, target) -> np.ndarray:
    """v(S) for each boolean row of ``masks``: mean score over background with S taken from x."""
    out = np.empty(masks.shape[0])
    b = bg.shape[0]
    chunk = max(1, 200_000 // b)
    for s in range(0, masks.shape[0], chunk):
        m = masks[s:s + chunk]
        rows = np.where(m[:, None, :], x[None, None, :], bg[None, :, :]).reshape(-1, x.size)
        out[s:s + chunk] = scorer.score(rows, target).reshape(m.shape[0], b).mean(axis=1)
    return out


def exact_shapley(scorer, x, background, target: int = 0) -> AttributionVector:
    """Shapley values by enumerating all 2^d coalitions (interventional value function)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    bg = _bg(background)
    d = x.size
    if bg.shape[1] != d:
        raise ShapeError(f"background has {bg.shape[1]} features, x has {d}")
    if d > MAX_EXACT_FEATURES:
        raise InvalidInputError(f"exact enumeration refused for d={d} > {MAX_EXACT_FEATURES}")
    codes = np.arange(2 ** d)
    masks = ((codes[:, None] >> np.arange(d)) & 1).astype(bool)
    v = _coalition_values(scorer, x, bg, masks, target)
    size = masks.sum(axis=1)
    weight = np.array([factorial(k) * factorial(d - k - 1) / factorial(d) if k < d else 0.0
                       for k in range(d + 1)])
    phi = np.zeros(d)
    for j in range(d):
        without = codes[~masks[:, j]]
        phi[j] = np.sum(weight[size[without]] * (v[without | (1 << j)] - v[without]))
    return AttributionVector(phi, "exact", 1)


def mc_shapley(scorer, x, background, n_perms: int = 1000, seed: int = 0,
               target: int = 0) -> AttributionVector:
    """Permutation-sampling Shapley estimate; unbiased for :func:`exact_shapley`."""
    if n_perms < 1:
        raise InvalidInputError("n_perms must be >= 1")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    bg = _bg(background)
    d = x.size
    rng = np.random.default_rng(seed)
    phi = np.zeros(d)
    chunk = max(1, 2000 // (d + 1))
    done = 0
    while done < n_perms:
        k = min(chunk, n_perms - done)
        perms = np.argsort(rng.random((k, d)), axis=1)
        # prefix masks: coalition after adding the first i features of each permutation
        rank = np.empty_like(perms)
        np.put_along_axis(rank, perms, np.arange(d)[None, :].repeat(k, 0), axis=1)
        masks = rank[:, None, :] < np.arange(d + 1)[None, :, None]
        v = _coalition_values(scorer, x, bg, masks.reshape(-1, d), target).reshape(k, d + 1)
        gains = np.diff(v, axis=1)
        np.add.at(phi, perms.ravel(), gains.ravel())
        done += k
    return AttributionVector(phi / n_perms, "montecarlo", n_perms)


def _path_points(x, bg, m_steps):
    alphas = (np.arange(m_steps) + 0.5) / m_steps
    diff = x[None, :] - bg
    pts = bg[:, None, :] + alphas[None, :, None] * diff[:, None, :]
    return pts.reshape(-1, x.size), diff


def path_attribution(scorer, x, background, m_steps: int = 32, target: int = 0) -> AttributionVector:
    """Integrated gradients from each background row to ``x`` (midpoint rule), averaged."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    bg = _bg(background)
    pts, diff = _path_points(x, bg, m_steps)
    g = scorer.score_grad(pts, target).reshape(bg.shape[0], m_steps, x.size).mean(axis=1)
    return AttributionVector((g * diff).mean(axis=0), "gradient-path", bg.shape[0])


def model_importance(scorer, eval_X, eval_y, background, m_steps: int = 32) -> AttributionVector:
    """Global importance: mean absolute path attribution over the evaluation samples,
    each attributed for its own label."""
    eval_X = np.atleast_2d(np.asarray(eval_X, dtype=np.float64))
    eval_y = np.atleast_1d(np.asarray(eval_y, dtype=np.int64))
    if eval_X.shape[0] == 0:
        raise InvalidInputError("need at least one evaluation sample")
    bg = _bg(background)
    b, d = bg.shape
    alphas = (np.arange(m_steps) + 0.5) / m_steps
    per = max(1, 40_000 // (b * m_steps))
    total = np.zeros(d)
    fast = getattr(scorer, "path_mean_grads", None)
    for s in range(0, eval_X.shape[0], per):
        xs, ys = eval_X[s:s + per], eval_y[s:s + per]
        diff = xs[:, None, :] - bg[None, :, :]                       # (k, b, d)
        if fast is not None:
            gmean = fast(xs, ys, bg, m_steps)
        else:
            pts = bg[None, :, None, :] + alphas[None, None, :, None] * diff[:, :, None, :]
            targets = np.repeat(ys, b * m_steps)
            g = scorer.score_grad(pts.reshape(-1, d), targets)
            gmean = g.reshape(xs.shape[0], b, m_steps, d).mean(axis=2)
        total += np.abs((gmean * diff).mean(axis=1)).sum(axis=0)
    return AttributionVector(total / eval_X.shape[0], "gradient-path", eval_X.shape[0])


@dataclass(frozen=True)
class StabilityScore:
    s: float
    agent_id: object = None


def _phi(v) -> np.ndarray:
    return v.phi if isinstance(v, AttributionVector) else np.asarray(v, dtype=np.float64).reshape(-1)


def stability_score(phi_i, phi_ref, eps: float = STABILITY_EPS, agent_id=None) -> StabilityScore:
    """``1 - ||phi_i - phi_ref|| / (||phi_ref|| + eps)``, unclamped."""
    a, r = _phi(phi_i), _phi(phi_ref)
    if a.shape != r.shape:
        raise ShapeError(f"attribution lengths differ: {a.size} vs {r.size}")
    s = 1.0 - float(np.linalg.norm(a - r)) / (float(np.linalg.norm(r)) + eps)
    return StabilityScore(s, agent_id)


@dataclass(frozen=True)
class CohortStats:
    mu: float
    sigma: float
    threshold: float
    size: int

    @property
    def blind_spot(self) -> bool:
        # max population z-score of K scores is (K-1)/sqrt(K) < 2 for K <= 5
        return self.size <= 5


def cohort_threshold(scores, k_sigma: float = 2.0) -> CohortStats:
    s = np.asarray([x.s if isinstance(x, StabilityScore) else x for x in scores], dtype=np.float64)
    if s.size < 2:
        raise InvalidInputError("cohort statistics need at least 2 scores")
    mu = float(s.mean())
    sigma = float(s.std())
    stats = CohortStats(mu, sigma, mu - k_sigma * sigma, int(s.size))
    if stats.blind_spot:
        logger.warning("cohort of %d cannot flag any single score below mu - 2 sigma", s.size)
    return stats
