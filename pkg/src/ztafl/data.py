"""Synthetic IIoT-flow data, CSV ingestion, normalization, splitting and non-IID partitioning."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_FEATURES = 40
DEFAULT_CLASSES = 6
CLASS_SHIFT = 2.0


@dataclass(eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if self.X.ndim != 2:
            raise ShapeError(f"X must be 2-D, got {self.X.shape}")
        if self.X.shape[0] != self.y.size:
            raise ShapeError(f"{self.X.shape[0]} rows but {self.y.size} labels")
        if not self.class_names:
            k = int(self.y.max()) + 1 if self.y.size else 0
            self.class_names = [str(c) for c in range(k)]

    def __len__(self):
        return self.y.size

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], list(self.class_names))

    def with_X(self, X) -> "Dataset":
        return Dataset(X, self.y.copy(), list(self.class_names))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)


def active_features(c: int, d: int, n_classes: int) -> np.ndarray:
    """Feature indices shifted for class ``c``: contiguous disjoint blocks of ``d // C``."""
    k = max(1, d // n_classes)
    return (np.arange(k) + c * k) % d


def generate_synthetic(n: int, d: int = DEFAULT_FEATURES, C: int = DEFAULT_CLASSES, seed: int = 0) -> Dataset:
    """Balanced class-conditional Gaussian mixture with unit covariance.

    Class ``c`` has mean ``CLASS_SHIFT`` on its own block of ``d // C`` features and
    0 elsewhere; leftover features are pure noise.
    """
    if C < 2:
        raise InvalidInputError("need at least 2 classes")
    if n < 10 * C:
        raise InvalidInputError(f"n={n} too small for {C} classes (need >= {10 * C})")
    rng = np.random.default_rng(seed)
    counts = np.full(C, n // C)
    counts[: n % C] += 1
    y = np.repeat(np.arange(C), counts)
    means = np.zeros((C, d))
    for c in range(C):
        means[c, active_features(c, d, C)] = CLASS_SHIFT
    X = means[y] + rng.standard_normal((n, d))
    order = rng.permutation(n)
    return Dataset(X[order], y[order], [f"class_{c}" for c in range(C)])


@dataclass(frozen=True, eq=False)
class MinMaxBounds:
    lo: np.ndarray
    hi: np.ndarray

    def apply(self, X) -> np.ndarray:
        span = self.hi - self.lo
        safe = np.where(span > 0, span, 1.0)
        out = (np.asarray(X, dtype=np.float64) - self.lo) / safe
        # zero-range features map to 0 regardless of value
        out[:, span <= 0] = 0.0
        return out


def minmax_normalize(train: Dataset, *others: Dataset):
    """Fit per-feature bounds on ``train`` and map every dataset with them (no clipping).

    Returns ``([train, *others], bounds)``.
    """
    if len(train) == 0:
        raise InvalidInputError("cannot fit bounds on an empty dataset")
    bounds = MinMaxBounds(train.X.min(axis=0), train.X.max(axis=0))
    return [ds.with_X(bounds.apply(ds.X)) for ds in (train, *others)], bounds


def _apportion(n: int, fractions, deficit):
    exact = n * np.asarray(fractions, dtype=np.float64)
    counts = np.floor(exact).astype(np.int64)
    remainder = n - counts.sum()
    priority = exact - counts + deficit
    for j in np.argsort(-priority, kind="stable")[:remainder]:
        counts[j] += 1
    return counts, exact


def split(dataset: Dataset, fractions=(0.7, 0.15, 0.15), seed: int = 0):
    """Stratified train/val/test split.

    Per class, each part gets ``floor`` or ``ceil`` of its exact share; leftover samples
    go where the running total lags its target most, so global sizes stay on target too.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.size != 3 or abs(fractions.sum() - 1.0) > 1e-9 or (fractions < 0).any():
        raise InvalidInputError(f"bad split fractions {fractions}")
    counts = dataset.class_counts()
    if (counts < 3).any():
        bad = [dataset.class_names[c] for c in np.flatnonzero(counts < 3)]
        raise InvalidInputError(f"classes with fewer than 3 samples: {bad}")
    rng = np.random.default_rng(seed)
    parts = [[], [], []]
    deficit = np.zeros(3)
    for c in range(dataset.n_classes):
        idx = rng.permutation(np.flatnonzero(dataset.y == c))
        alloc, exact = _apportion(idx.size, fractions, deficit)
        deficit += exact - alloc
        bounds = np.concatenate([[0], np.cumsum(alloc)])
        for j in range(3):
            parts[j].append(idx[bounds[j]:bounds[j + 1]])
    return tuple(dataset.subset(np.sort(np.concatenate(p))) for p in parts)


@dataclass(frozen=True)
class PartitionSpec:
    n_agents: int
    classes_per_agent: int = 3
    power_exponent: float = 1.5
    min_size: int = 50
    max_size: int = 500
    label_skew: bool = True
    quantity_skew: bool = True
    feature_skew_groups: Optional[tuple] = None
    holdout_frac: float = 0.1

    def validate(self, n_classes: int):
        if self.n_agents < 1:
            raise InvalidInputError("need at least one agent")
        if self.min_size < 1 or self.max_size < self.min_size:
            raise InvalidInputError(f"bad size bounds [{self.min_size}, {self.max_size}]")
        if not 1 <= self.classes_per_agent <= n_classes:
            raise InvalidInputError(
                f"classes_per_agent={self.classes_per_agent} outside [1, {n_classes}]"
            )
        if not 0.0 <= self.holdout_frac < 1.0:
            raise InvalidInputError("holdout_frac must be in [0, 1)")


@dataclass(eq=False)
class AgentShard:
    agent_id: int
    train: Dataset
    holdout: Dataset
    classes: tuple = ()
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    resampled: bool = False

    @property
    def size(self) -> int:
        return len(self.train) + len(self.holdout)


def power_law_sizes(n: int, exponent: float, lo: int, hi: int, rng) -> np.ndarray:
    """Inverse-CDF draws from a density proportional to s^-exponent on [lo, hi]."""
    u = rng.random(n)
    if lo == hi:
        return np.full(n, lo, dtype=np.int64)
    if abs(exponent - 1.0) < 1e-12:
        s = lo * (hi / lo) ** u
    else:
        a = 1.0 - exponent
        s = (lo ** a + u * (hi ** a - lo ** a)) ** (1.0 / a)
    return np.clip(np.rint(s), lo, hi).astype(np.int64)


def partition_noniid(train: Dataset, spec: PartitionSpec, seed: int = 0) -> list:
    """Split ``train`` across agents with label, quantity and optional feature skew."""
    C = train.n_classes
    spec.validate(C)
    rng = np.random.default_rng(seed)
    if spec.quantity_skew:
        sizes = power_law_sizes(spec.n_agents, spec.power_exponent, spec.min_size, spec.max_size, rng)
    else:
        even = len(train) // spec.n_agents
        sizes = np.full(spec.n_agents, min(spec.max_size, max(spec.min_size, even)), dtype=np.int64)
    if sizes.sum() > len(train):
        raise InvalidInputError(
            f"shards need {sizes.sum()} samples but the training set has {len(train)}"
        )
    pools = [list(rng.permutation(np.flatnonzero(train.y == c))) for c in range(C)]
    groups = spec.feature_skew_groups
    shards = []
    for agent in range(spec.n_agents):
        k = spec.classes_per_agent if spec.label_skew else C
        classes = np.sort(rng.choice(C, size=k, replace=False))
        per_class = np.full(k, sizes[agent] // k)
        per_class[: sizes[agent] % k] += 1
        taken, resampled = [], False
        for c, m in zip(classes, per_class):
            pool = pools[c]
            got = [pool.pop() for _ in range(min(m, len(pool)))]
            missing = m - len(got)
            if missing > 0:
                # class exhausted: top up with replacement from the whole class
                resampled = True
                extra = rng.choice(np.flatnonzero(train.y == c), size=missing, replace=True)
                got.extend(extra.tolist())
                logger.warning("agent %d: class %d pool exhausted, resampled %d", agent, c, missing)
            taken.extend(got)
        idx = rng.permutation(np.asarray(taken, dtype=np.int64))
        X = train.X[idx].copy()
        if groups:
            keep = np.zeros(train.n_features, dtype=bool)
            keep[list(groups[agent % len(groups)])] = True
            X[:, ~keep] = 0.0
        n_hold = int(round(spec.holdout_frac * idx.size))
        if idx.size > 1:
            n_hold = min(max(n_hold, 1 if spec.holdout_frac > 0 else 0), idx.size - 1)
        else:
            n_hold = 0
        full = Dataset(X, train.y[idx], list(train.class_names))
        shards.append(AgentShard(
            agent_id=agent,
            train=full.subset(np.arange(n_hold, idx.size)),
            holdout=full.subset(np.arange(n_hold)),
            classes=tuple(int(c) for c in classes),
            indices=idx,
            resampled=resampled,
        ))
    return shards


def load_csv(path, label_column: str, class_names: Optional[Sequence[str]] = None) -> Dataset:
    """Read a headered, comma-separated UTF-8 file; every column except the label is a feature.

    Labels are mapped to indices in ``class_names`` order (sorted distinct labels if not
    given). Errors name the 1-based data row at fault.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidInputError(f"{path}: empty file") from None
        if label_column not in header:
            raise InvalidInputError(f"{path}: no column named {label_column!r}")
        li = header.index(label_column)
        rows, labels = [], []
        for rownum, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise InvalidInputError(
                    f"{path}: row {rownum} has {len(row)} fields, header has {len(header)}"
                )
            try:
                rows.append([float(v) for j, v in enumerate(row) if j != li])
            except ValueError as exc:
                raise InvalidInputError(f"{path}: row {rownum} is not numeric ({exc})") from None
            labels.append(row[li].strip())
    if class_names is None:
        class_names = sorted(set(labels))
    lookup = {name: i for i, name in enumerate(class_names)}
    y = []
    for rownum, lab in enumerate(labels, start=1):
        if lab not in lookup:
            raise InvalidInputError(f"{path}: row {rownum} has unknown label {lab!r}")
        y.append(lookup[lab])
    d = len(header) - 1
    X = np.asarray(rows, dtype=np.float64).reshape(len(rows), d)
    if not np.isfinite(X).all():
        raise InvalidInputError(f"{path}: non-finite feature values")
    return Dataset(X, np.asarray(y, dtype=np.int64), list(class_names))


def write_csv(dataset: Dataset, path, label_column: str = "label"):
    header = [f"f{j}" for j in range(dataset.n_features)] + [label_column]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for x, c in zip(dataset.X, dataset.y):
            w.writerow([repr(float(v)) for v in x] + [dataset.class_names[c]])
