"""L-infinity evasion attacks (FGSM, PGD) and on-device adversarial training helpers.

All inputs live in the feature box ``[0, 1]^d``; every emitted example stays inside
that box and within ``eps`` of its source in the max norm.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset
from .errors import InvalidInputError, NumericError
from .model import input_gradients, predict

EPS_GRID = (0.05, 0.1, 0.15, 0.2)
_BOX_TOL = 1e-9


@dataclass(frozen=True)
class AttackBudget:
    """Perturbation radius ``eps`` plus PGD schedule; ``steps == 1`` without random start is FGSM."""

    eps: float
    steps: int = 1
    step_size: Optional[float] = None
    random_start: Optional[bool] = None

    def __post_init__(self):
        if self.eps < 0:
            raise InvalidInputError("eps must be >= 0")
        if self.steps < 1:
            raise InvalidInputError("steps must be >= 1")
        if self.step_size is None:
            object.__setattr__(self, "step_size", self.eps if self.steps == 1 else self.eps / 4)
        if self.random_start is None:
            object.__setattr__(self, "random_start", self.steps > 1)
        if self.step_size > self.eps + 1e-12:
            raise InvalidInputError(f"step_size {self.step_size} exceeds eps {self.eps}")

    @classmethod
    def fgsm(cls, eps: float) -> "AttackBudget":
        return cls(eps, 1, eps, False)

    @classmethod
    def pgd(cls, eps: float, steps: int) -> "AttackBudget":
        return cls(eps, steps)


def _check_box(X):
    if X.size and (X.min() < -_BOX_TOL or X.max() > 1 + _BOX_TOL):
        raise InvalidInputError("inputs must lie in the [0, 1] feature box")


def _signed_grad(model, X, y):
    g = input_gradients(model, X, y)
    if not np.isfinite(g).all():
        raise NumericError("non-finite input gradient")
    return np.sign(g)


def _assert_ball(X_adv, X, eps):
    gap = np.abs(X_adv - X).max() if X.size else 0.0
    assert gap <= eps + 1e-12, f"L-inf constraint violated: {gap} > {eps}"
    assert X_adv.size == 0 or (X_adv.min() >= 0.0 and X_adv.max() <= 1.0)


def fgsm(model, x, y, eps: float) -> np.ndarray:
    """``clip(x + eps * sign(grad_x loss), 0, 1)`` for a single sample or a batch."""
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X2 = np.atleast_2d(X)
    y2 = np.atleast_1d(np.asarray(y, dtype=np.int64))
    _check_box(X2)
    X2 = np.clip(X2, 0.0, 1.0)
    X_adv = np.clip(X2 + eps * _signed_grad(model, X2, y2), 0.0, 1.0)
    _assert_ball(X_adv, X2, eps)
    return X_adv[0] if single else X_adv


def pgd(model, x, y, budget: AttackBudget, seed: int = 0) -> np.ndarray:
    """Projected signed-gradient ascent inside the eps-ball intersected with the box."""
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X0 = np.atleast_2d(X)
    y2 = np.atleast_1d(np.asarray(y, dtype=np.int64))
    _check_box(X0)
    X0 = np.clip(X0, 0.0, 1.0)
    eps = budget.eps
    lo, hi = np.maximum(X0 - eps, 0.0), np.minimum(X0 + eps, 1.0)
    Xa = X0.copy()
    if budget.random_start and eps > 0:
        rng = np.random.default_rng(seed)
        Xa = np.clip(Xa + rng.uniform(-eps, eps, size=Xa.shape), lo, hi)
    for _ in range(budget.steps):
        Xa = np.clip(Xa + budget.step_size * _signed_grad(model, Xa, y2), lo, hi)
        _assert_ball(Xa, X0, eps)
    return Xa[0] if single else Xa


def attack(model, X, y, budget: AttackBudget, seed: int = 0) -> np.ndarray:
    if budget.steps == 1 and not budget.random_start and budget.step_size == budget.eps:
        return fgsm(model, X, y, budget.eps)
    return pgd(model, X, y, budget, seed)


def adv_augment(model, shard, ratio: float = 0.3, budget: Optional[AttackBudget] = None,
                seed: int = 0) -> Dataset:
    """Replace a seed-chosen ``ratio`` fraction of ``shard`` by adversarial copies (labels kept)."""
    if not 0.0 <= ratio <= 1.0:
        raise InvalidInputError("ratio must be in [0, 1]")
    budget = budget or AttackBudget.fgsm(0.1)
    X = np.array(shard.X, dtype=np.float64)
    y = np.asarray(shard.y, dtype=np.int64)
    idx = select_adversarial(len(y), ratio, seed)
    if idx.size:
        X[idx] = attack(model, X[idx], y[idx], budget, seed)
    return Dataset(X, y.copy(), list(getattr(shard, "class_names", []) or []))


def select_adversarial(n: int, ratio: float, seed: int) -> np.ndarray:
    k = int(round(ratio * n))
    return np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))


def epoch_hook(ratio: float, budget: AttackBudget, seed: int):
    """Hook for :func:`ztafl.model.local_train` that refreshes adversarial copies every epoch.

    The adversarial subset is fixed for the whole call; the examples themselves are
    regenerated against the model as it stands at the start of each epoch.
    """
    cache = {}

    def hook(model, X, y, epoch):
        if "idx" not in cache:
            cache["idx"] = select_adversarial(len(y), ratio, seed)
        idx = cache["idx"]
        if idx.size == 0:
            return X, y
        Xe = X.copy()
        Xe[idx] = attack(model, X[idx], y[idx], budget, seed + 7919 * (epoch + 1))
        return Xe, y

    return hook


def robust_eval(model, testset, budget: AttackBudget, seed: int = 0) -> float:
    """White-box accuracy on per-sample adversarial examples built against ``model``."""
    y = np.asarray(testset.y, dtype=np.int64)
    if y.size == 0:
        return 0.0
    X_adv = attack(model, testset.X, y, budget, seed)
    return float(np.mean(predict(model, X_adv) == y))
