"""Small numpy MLP classifier with manual backprop, Adam and 8-bit update quantization.

Parameters live in one flat float64 vector (:class:`ParamVector`). Layer ``k``
occupies a contiguous block laid out as the ``(dims[k], dims[k+1])`` weight
matrix in row-major order followed by the ``dims[k+1]`` bias entries.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidInputError, NumericError, ShapeError

DEFAULT_HIDDEN = (64, 32)


def param_count(layer_dims: Sequence[int]) -> int:
    return sum((a + 1) * b for a, b in zip(layer_dims[:-1], layer_dims[1:]))


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat, read-only parameter (or parameter delta) vector tagged with layer dims."""

    values: np.ndarray
    shape_tag: tuple = ()

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ShapeError(f"ParamVector must be 1-D, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise NumericError("ParamVector values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "shape_tag", tuple(int(d) for d in self.shape_tag))

    def __len__(self):
        return self.values.size

    def _check(self, other: "ParamVector"):
        if not isinstance(other, ParamVector):
            raise TypeError(f"expected ParamVector, got {type(other).__name__}")
        if other.shape_tag != self.shape_tag or len(other) != len(self):
            raise ShapeError(f"shape tags differ: {self.shape_tag} vs {other.shape_tag}")

    def __add__(self, other):
        self._check(other)
        return ParamVector(self.values + other.values, self.shape_tag)

    def __sub__(self, other):
        self._check(other)
        return ParamVector(self.values - other.values, self.shape_tag)

    def __neg__(self):
        return ParamVector(-self.values, self.shape_tag)

    def __mul__(self, k):
        return ParamVector(self.values * float(k), self.shape_tag)

    __rmul__ = __mul__

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.shape_tag)

    def equals(self, other: "ParamVector") -> bool:
        """Bit-exact equality, including the shape tag."""
        return (
            self.shape_tag == other.shape_tag
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    # on-wire form: 8-byte little-endian length, then float32 values
    def wire_bytes(self) -> int:
        return 8 + 4 * len(self)

    def to_wire(self) -> bytes:
        return struct.pack("<Q", len(self)) + self.values.astype("<f4").tobytes()

    @classmethod
    def from_wire(cls, data: bytes, shape_tag: tuple = ()) -> "ParamVector":
        (n,) = struct.unpack_from("<Q", data, 0)
        if len(data) != 8 + 4 * n:
            raise ShapeError(f"wire payload has {len(data)} bytes, expected {8 + 4 * n}")
        vals = np.frombuffer(data, dtype="<f4", offset=8, count=n).astype(np.float64)
        return cls(vals, shape_tag)


@dataclass(frozen=True, eq=False)
class MlpModel:
    """Rectifier MLP with a softmax output layer."""

    layer_dims: tuple
    params: ParamVector

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or min(dims) < 1:
            raise InvalidInputError(f"bad layer dims {dims}")
        object.__setattr__(self, "layer_dims", dims)
        if len(self.params) != param_count(dims):
            raise ShapeError(
                f"{len(self.params)} params given, dims {dims} need {param_count(dims)}"
            )
        if self.params.shape_tag != dims:
            object.__setattr__(self, "params", ParamVector(self.params.values, dims))

    @classmethod
    def init(cls, layer_dims: Sequence[int], seed: int) -> "MlpModel":
        """Glorot-uniform weights, zero biases."""
        dims = tuple(int(d) for d in layer_dims)
        rng = np.random.default_rng(seed)
        chunks = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
            chunks.append(np.zeros(fan_out))
        return cls(dims, ParamVector(np.concatenate(chunks), dims))

    @classmethod
    def zeros(cls, layer_dims: Sequence[int]) -> "MlpModel":
        dims = tuple(int(d) for d in layer_dims)
        return cls(dims, ParamVector(np.zeros(param_count(dims)), dims))

    @property
    def n_features(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def layers(self, values: Optional[np.ndarray] = None) -> list:
        """(W, b) views into ``values`` (defaults to this model's params)."""
        v = self.params.values if values is None else values
        out, pos = [], 0
        for a, b in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            W = v[pos:pos + a * b].reshape(a, b)
            pos += a * b
            out.append((W, v[pos:pos + b]))
            pos += b
        return out

    def with_params(self, params) -> "MlpModel":
        if not isinstance(params, ParamVector):
            params = ParamVector(params, self.layer_dims)
        return replace(self, params=params)

    def apply_delta(self, delta: ParamVector) -> "MlpModel":
        return self.with_params(self.params + delta)

    # duck-typed scorer interface used by the attribution engines
    def score(self, X, targets) -> np.ndarray:
        """Softmax probability assigned to ``targets`` for each row of ``X``."""
        return class_score(self, X, targets)

    def score_grad(self, X, targets) -> np.ndarray:
        return class_score_grad(self, X, targets)

    def path_mean_grads(self, xs, targets, background, m_steps: int, dtype=np.float32) -> np.ndarray:
        """Midpoint-rule mean of ``score_grad`` along each straight path background -> x.

        Returns shape ``(len(xs), len(background), d)``. Uses the linearity of the first
        layer: its pre-activations are interpolated directly, and the last
        back-multiplication by ``W1`` happens once, after averaging over steps.
        Computed in ``dtype`` (single precision by default, for speed).
        """
        xs = np.atleast_2d(xs).astype(dtype)
        bg = np.atleast_2d(background).astype(dtype)
        k, b = xs.shape[0], bg.shape[0]
        layers = [(W.astype(dtype), bias.astype(dtype)) for W, bias in self.layers()]
        W1, b1 = layers[0]
        alphas = ((np.arange(m_steps) + 0.5) / m_steps).astype(dtype)
        A = bg @ W1 + b1                                   # (b, h)
        D = (xs @ W1)[:, None, :] - (bg @ W1)[None, :, :]   # (k, b, h)
        Z1 = A[None, :, None, :] + alphas[None, None, :, None] * D[:, :, None, :]
        Z1 = Z1.reshape(-1, W1.shape[1])
        pre = [Z1]
        a = np.maximum(Z1, 0.0)
        for j, (W, bias) in enumerate(layers[1:], start=1):
            z = a @ W + bias
            if j < len(layers) - 1:
                pre.append(z)
                a = np.maximum(z, 0.0)
        P = _softmax(z)
        n = P.shape[0]
        t = np.repeat(np.asarray(targets, dtype=np.int64), b * m_steps)
        pt = P[np.arange(n), t]
        g = -pt[:, None] * P
        g[np.arange(n), t] += pt
        for j in range(len(layers) - 1, 0, -1):
            g = (g @ layers[j][0].T) * (pre[j - 1] > 0)
        g1 = g.reshape(k, b, m_steps, -1).mean(axis=2)
        return (g1 @ W1.T).astype(np.float64)


def _as_batch(model: MlpModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ShapeError(f"expected (n, {model.n_features}) input, got {X.shape}")
    return X


def _softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def _forward_cache(model: MlpModel, X: np.ndarray, values=None):
    """Returns (layer inputs, hidden pre-activations, logits)."""
    layers = model.layers(values)
    inputs, pre = [], []
    a = X
    for k, (W, b) in enumerate(layers):
        inputs.append(a)
        z = a @ W + b
        if k < len(layers) - 1:
            pre.append(z)
            a = np.maximum(z, 0.0)
        else:
            return inputs, pre, z


def _backward(layers, inputs, pre, dlogits, want_params=True, want_input=False):
    grads = [None] * len(layers)
    g = dlogits
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        if want_params:
            grads[k] = (inputs[k].T @ g, g.sum(axis=0))
        if k > 0 or want_input:
            g = g @ W.T
            if k > 0:
                g = g * (pre[k - 1] > 0)
    flat = None
    if want_params:
        flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    return flat, (g if want_input else None)


def forward(model: MlpModel, X) -> np.ndarray:
    """Class probabilities, one softmax row per input row."""
    X = _as_batch(model, X)
    if not np.isfinite(X).all():
        raise InvalidInputError("inputs must be finite")
    return _softmax(_forward_cache(model, X)[2])


def predict(model: MlpModel, X) -> np.ndarray:
    return np.argmax(forward(model, X), axis=1)


def _check_labels(model, y, n):
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.size != n:
        raise ShapeError(f"{y.size} labels for {n} samples")
    if y.size and (y.min() < 0 or y.max() >= model.n_classes):
        raise InvalidInputError(f"labels must lie in [0, {model.n_classes})")
    return y


def _loss_grad_raw(model, values, X, y):
    layers = model.layers(values)
    inputs, pre, Z = _forward_cache(model, X, values)
    n = X.shape[0]
    Zs = Z - Z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(Zs).sum(axis=1))
    loss = float(np.mean(lse - Zs[np.arange(n), y]))
    P = np.exp(Zs - lse[:, None])
    P[np.arange(n), y] -= 1.0
    flat, _ = _backward(layers, inputs, pre, P / n)
    return loss, flat


def loss_and_grad(model: MlpModel, X, y):
    """Mean cross-entropy (log-sum-exp form) and its gradient w.r.t. the parameters."""
    X = _as_batch(model, X)
    if X.shape[0] == 0:
        raise InvalidInputError("empty batch")
    y = _check_labels(model, y, X.shape[0])
    loss, flat = _loss_grad_raw(model, model.params.values, X, y)
    return loss, ParamVector(flat, model.layer_dims)


def input_gradients(model: MlpModel, X, y) -> np.ndarray:
    """Row ``i`` is the gradient of sample ``i``'s own cross-entropy w.r.t. ``X[i]``."""
    X = _as_batch(model, X)
    y = _check_labels(model, y, X.shape[0])
    layers = model.layers()
    inputs, pre, Z = _forward_cache(model, X)
    P = _softmax(Z)
    P[np.arange(X.shape[0]), y] -= 1.0
    _, gx = _backward(layers, inputs, pre, P, want_params=False, want_input=True)
    return gx


def input_gradient(model: MlpModel, x, y) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return input_gradients(model, x.reshape(1, -1), [int(y)])[0]


def class_score(model: MlpModel, X, targets) -> np.ndarray:
    X = _as_batch(model, X)
    t = np.broadcast_to(np.asarray(targets, dtype=np.int64), (X.shape[0],))
    return _softmax(_forward_cache(model, X)[2])[np.arange(X.shape[0]), t]


def class_score_grad(model: MlpModel, X, targets) -> np.ndarray:
    """Gradient of the target-class probability w.r.t. each input row."""
    X = _as_batch(model, X)
    n = X.shape[0]
    t = np.broadcast_to(np.asarray(targets, dtype=np.int64), (n,))
    layers = model.layers()
    inputs, pre, Z = _forward_cache(model, X)
    P = _softmax(Z)
    pt = P[np.arange(n), t]
    # d p_t / d z = p_t (e_t - p)
    dZ = -pt[:, None] * P
    dZ[np.arange(n), t] += pt
    _, gx = _backward(layers, inputs, pre, dZ, want_params=False, want_input=True)
    return gx


@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n: int, lr: float = 0.001, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)


def adam_step(params, grad, state: AdamState):
    """One bias-corrected Adam update. Accepts ParamVectors or plain arrays."""
    p = params.values if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)
    g = grad.values if isinstance(grad, ParamVector) else np.asarray(grad, dtype=np.float64)
    if p.shape != g.shape or state.m.shape != p.shape:
        raise ShapeError(f"adam shapes differ: params {p.shape}, grad {g.shape}, state {state.m.shape}")
    if not np.isfinite(g).all():
        raise NumericError("non-finite gradient")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_p = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = replace(state, m=m, v=v, step=t)
    if isinstance(params, ParamVector):
        return ParamVector(new_p, params.shape_tag), new_state
    return new_p, new_state


EpochHook = Callable[[MlpModel, np.ndarray, np.ndarray, int], tuple]


def local_train(
    model: MlpModel,
    shard,
    epochs: int = 5,
    batch_size: int = 128,
    seed: int = 0,
    lr: float = 0.001,
    epoch_hook: Optional[EpochHook] = None,
) -> MlpModel:
    """Mini-batch Adam on ``shard`` (anything with ``X`` and ``y``); returns a new model.

    ``epoch_hook(model, X, y, epoch)`` may return a replacement ``(X, y)`` for the
    epoch, e.g. adversarially augmented data generated against the current model.
    Optimizer state starts fresh on every call.
    """
    X = np.asarray(shard.X, dtype=np.float64)
    y = np.asarray(shard.y, dtype=np.int64)
    if X.shape[0] == 0:
        raise InvalidInputError("cannot train on an empty shard")
    X = _as_batch(model, X)
    y = _check_labels(model, y, X.shape[0])
    rng = np.random.default_rng(seed)
    values = model.params.values.copy()
    state = AdamState.fresh(values.size, lr=lr)
    n = X.shape[0]
    for epoch in range(epochs):
        Xe, ye = X, y
        if epoch_hook is not None:
            Xe, ye = epoch_hook(model.with_params(values), X, y, epoch)
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, g = _loss_grad_raw(model, values, Xe[idx], ye[idx])
            values, state = adam_step(values, g, state)
    return model.with_params(ParamVector(values, model.layer_dims))


@dataclass(frozen=True, eq=False)
class QuantizedUpdate:
    """Affine 8-bit code of a parameter delta: ``value ~= code * scale + zero_point``."""

    codes: np.ndarray
    scale: float
    zero_point: float
    length: int
    shape_tag: tuple = field(default=())

    @property
    def payload_bytes(self) -> int:
        return self.length + 16

    def wire_bytes(self) -> int:
        return 8 + self.payload_bytes

    def to_wire(self) -> bytes:
        return (
            struct.pack("<Q", self.length)
            + self.codes.astype(np.uint8).tobytes()
            + struct.pack("<dd", self.scale, self.zero_point)
        )

    @classmethod
    def from_wire(cls, data: bytes, shape_tag: tuple = ()) -> "QuantizedUpdate":
        (n,) = struct.unpack_from("<Q", data, 0)
        if len(data) != 8 + n + 16:
            raise ShapeError(f"wire payload has {len(data)} bytes, expected {n + 24}")
        codes = np.frombuffer(data, dtype=np.uint8, offset=8, count=n).copy()
        scale, zp = struct.unpack_from("<dd", data, 8 + n)
        return cls(codes, scale, zp, n, tuple(shape_tag))


def quantize(delta: ParamVector) -> QuantizedUpdate:
    v = delta.values
    if v.size == 0:
        raise InvalidInputError("cannot quantize an empty vector")
    lo, hi = float(v.min()), float(v.max())
    scale = (hi - lo) / 255.0
    if scale == 0.0:
        codes = np.zeros(v.size, dtype=np.uint8)
    else:
        # np.rint rounds half to even
        codes = np.clip(np.rint((v - lo) / scale), 0, 255).astype(np.uint8)
    return QuantizedUpdate(codes, scale, lo, v.size, delta.shape_tag)


def dequantize(q: QuantizedUpdate) -> ParamVector:
    return ParamVector(q.codes.astype(np.float64) * q.scale + q.zero_point, q.shape_tag)


@dataclass
class EvalResult:
    accuracy: float
    f1: np.ndarray
    confusion: np.ndarray

    @property
    def macro_f1(self) -> float:
        return float(np.mean(self.f1))


def scores_from_confusion(confusion) -> EvalResult:
    cm = np.asarray(confusion, dtype=np.int64)
    n = cm.sum()
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(denom > 0, 2.0 * tp / denom, 0.0)
    acc = float(tp.sum() / n) if n else 0.0
    return EvalResult(acc, f1, cm)


def evaluate(model: MlpModel, dataset) -> EvalResult:
    """Accuracy, per-class F1 and confusion matrix (rows = true class)."""
    y = np.asarray(dataset.y, dtype=np.int64)
    pred = predict(model, dataset.X)
    C = model.n_classes
    cm = np.bincount(y * C + pred, minlength=C * C).reshape(C, C)
    return scores_from_confusion(cm)
