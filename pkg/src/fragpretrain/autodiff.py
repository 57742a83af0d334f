"""Minimal dense reverse-mode autodiff on numpy arrays.

Operations executed inside an active :class:`Tape` whose inputs are tracked
(watched parameters or results of recorded operations) append a record
with a vector-Jacobian closure.  :meth:`Tape.backward` walks the records in
reverse creation order, so gradients are deterministic for a fixed program.

Values are float32 by default; :func:`precision` switches the dtype used
for newly created tensors (gradient checks run in float64).
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DetachedLoss, NotScalar, NumericError, SegmentOutOfRange, ShapeMismatch

_state = {"dtype": np.float32, "debug": bool(os.environ.get("FRAGPRETRAIN_DEBUG"))}
_tapes: list["Tape"] = []


def get_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = old


def set_debug(flag: bool) -> None:
    """In debug mode every forward op checks its output for NaN/Inf."""
    _state["debug"] = flag


class Tensor:
    __slots__ = ("value", "name", "__weakref__")

    def __init__(self, value, name: str | None = None, dtype=None):
        self.value = np.ascontiguousarray(value, dtype=dtype or get_dtype())
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise NotScalar(f"tensor of shape {self.shape} is not a scalar")
        return float(self.value.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.value.dtype})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__


class Tape:
    """Records operations and computes gradients of a scalar w.r.t. watched tensors."""

    def __init__(self, params: Iterable[Tensor] = ()):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.params: list[Tensor] = []
        self._tracked: set[int] = set()
        self.watch(params)

    def watch(self, params: Iterable[Tensor]) -> None:
        for p in params:
            if id(p) not in self._tracked:
                self.params.append(p)
                self._tracked.add(id(p))

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def tracks(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        if any(id(t) in self._tracked for t in inputs):
            self.records.append((out, inputs, vjp))
            self._tracked.add(id(out))

    def backward(self, loss: Tensor) -> list[np.ndarray]:
        """Gradients of ``loss`` for every watched tensor, in watch order."""
        if loss.value.size != 1:
            raise NotScalar(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._tracked:
            raise DetachedLoss("loss does not depend on any watched tensor on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for out, inputs, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or id(inp) not in self._tracked:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(p), np.zeros_like(p.value)) for p in self.params]


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(value, dtype=value.dtype if value.dtype.kind == "f" else None)
    if _state["debug"] and not np.all(np.isfinite(out.value)):
        raise NumericError("non-finite value produced by a forward op")
    for tape in _tapes:
        tape._record(out, inputs, vjp)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- elementwise / linear algebra ------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _emit(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _emit(a.value - b.value, (a, b), lambda g: (g, -g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if x.value.ndim != 2 or b.value.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"add_bias: {x.shape} + {b.shape}")
    return _emit(x.value + b.value, (x, b), lambda g: (g, g.sum(axis=0)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.value.dtype.type(c)
    return _emit(x.value * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _emit(np.where(mask, x.value, 0).astype(x.value.dtype), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.value)
    return _emit(y, (x,), lambda g: (g * y,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.value.dtype) / x.value.dtype.type(1.0 - rate)
    return _emit(x.value * keep, (x,), lambda g: (g * keep,))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    values = [p.value for p in parts]
    rows = {v.shape[0] for v in values}
    if axis == 1 and len(rows) != 1:
        raise ShapeMismatch(f"concat: row counts differ {sorted(rows)}")
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])

    def vjp(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _emit(np.concatenate(values, axis=axis), tuple(parts), vjp)


# -- reductions ---------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(np.asarray(x.value.sum(), dtype=x.value.dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, max(x.value.size, 1)
    return _emit(np.asarray(x.value.mean() if x.value.size else 0.0, dtype=x.value.dtype), (x,),
                 lambda g: (np.broadcast_to(g / n, shape).astype(x.value.dtype),))


def row_mean(x: Tensor) -> Tensor:
    """Mean of the rows of a 2-d tensor, shape ``(1, m)``."""
    if x.value.ndim != 2 or x.shape[0] == 0:
        raise ShapeMismatch(f"row_mean needs a non-empty matrix, got {x.shape}")
    n = x.shape[0]
    return _emit(x.value.mean(axis=0, keepdims=True), (x,),
                 lambda g: (np.repeat(g / x.value.dtype.type(n), n, axis=0),))


def _check_segments(ids: np.ndarray, n_values: int, n_segments: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != (n_values,):
        raise ShapeMismatch(f"segment ids shape {ids.shape} does not match {n_values} rows")
    if ids.size and (ids.min() < 0 or ids.max() >= n_segments):
        raise SegmentOutOfRange(f"segment ids must lie in [0, {n_segments})")
    return ids


def segment_sum(values: Tensor, segment_ids, n_segments: int) -> Tensor:
    ids = _check_segments(segment_ids, values.shape[0], n_segments)
    # accumulate in float64 so long segments round once, not once per row
    out = np.zeros((n_segments,) + values.shape[1:], dtype=np.float64)
    np.add.at(out, ids, values.value)
    return _emit(out.astype(values.value.dtype), (values,), lambda g: (g[ids],))


def segment_counts(segment_ids, n_segments: int) -> np.ndarray:
    return np.bincount(np.asarray(segment_ids, dtype=np.int64), minlength=n_segments)


def segment_mean(values: Tensor, segment_ids, n_segments: int, return_mask: bool = False):
    """Per-segment mean; empty segments give zero rows (``mask`` marks them)."""
    ids = _check_segments(segment_ids, values.shape[0], n_segments)
    counts = segment_counts(ids, n_segments)
    empty = counts == 0
    shape = (-1,) + (1,) * (values.value.ndim - 1)
    out = np.zeros((n_segments,) + values.shape[1:], dtype=np.float64)
    np.add.at(out, ids, values.value)
    out /= np.maximum(counts, 1).reshape(shape)
    inv = (1.0 / np.maximum(counts, 1)).astype(values.value.dtype)
    t = _emit(out.astype(values.value.dtype), (values,), lambda g: ((g * inv.reshape(shape))[ids],))
    return (t, empty) if return_mask else t


def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatch("embedding_lookup expects a 1-d index array")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise SegmentOutOfRange(f"lookup index out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(table.value[idx], (table,), vjp)


def pairwise_dot(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b.T``: all dot products between rows of ``a`` and rows of ``b``."""
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"pairwise_dot: {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return _emit(av @ bv.T, (a, b), lambda g: (g @ bv, g.T @ av))


def log_sum_exp(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise stabilized log-sum-exp; entries where ``mask`` is False are excluded."""
    if x.value.ndim != 2:
        raise ShapeMismatch("log_sum_exp expects a matrix")
    v = x.value
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != v.shape:
            raise ShapeMismatch("log_sum_exp mask shape mismatch")
        if not mask.any(axis=1).all():
            raise ShapeMismatch("log_sum_exp: every row needs at least one unmasked entry")
        v = np.where(mask, v, -np.inf)
    m = v.max(axis=1, keepdims=True)
    e = np.exp(v - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0].astype(x.value.dtype)
    p = (e / s).astype(x.value.dtype)
    return _emit(out, (x,), lambda g: (g[:, None] * p,))


# -- losses -------------------------------------------------------------------

def sigmoid_bce_with_logits(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean binary cross-entropy over observed entries (``mask`` True)."""
    z = logits.value
    y = np.asarray(targets, dtype=z.dtype)
    if y.shape != z.shape:
        raise ShapeMismatch(f"targets {y.shape} vs logits {z.shape}")
    w = np.ones_like(z) if mask is None else np.asarray(mask, dtype=z.dtype)
    n = max(float(w.sum()), 1.0)
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray((per * w).sum() / n, dtype=z.dtype)
    sig = 1.0 / (1.0 + np.exp(-z))
    return _emit(out, (logits,), lambda g: ((g * (sig - y) * w / n).astype(z.dtype),))


def softmax_ce_with_logits(logits: Tensor, targets, mask: np.ndarray | None = None,
                           reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy; ``mask`` restricts each row's softmax support."""
    z = logits.value
    t = np.asarray(targets, dtype=np.int64)
    if z.ndim != 2 or t.shape != (z.shape[0],):
        raise ShapeMismatch(f"logits {z.shape} vs targets {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= z.shape[1]):
        raise SegmentOutOfRange("target class out of range")
    v = z
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ShapeMismatch("softmax_ce mask shape mismatch")
        if not mask[np.arange(len(t)), t].all():
            raise ShapeMismatch("softmax_ce: target entries must be unmasked")
        v = np.where(mask, z, -np.inf)
    m = v.max(axis=1, keepdims=True)
    e = np.exp(v - m)
    s = e.sum(axis=1, keepdims=True)
    rows = np.arange(len(t))
    per = (m[:, 0] + np.log(s[:, 0]) - z[rows, t]).astype(z.dtype)
    p = e / s
    p[rows, t] -= 1.0
    p = p.astype(z.dtype)
    if reduction == "none":
        return _emit(per, (logits,), lambda g: (g[:, None] * p,))
    n = max(len(t), 1)
    return _emit(np.asarray(per.mean() if len(t) else 0.0, dtype=z.dtype), (logits,),
                 lambda g: ((g / n) * p,))


def masked_mse(pred: Tensor, targets, mask=None) -> Tensor:
    y = np.asarray(targets, dtype=pred.value.dtype)
    w = np.ones_like(y) if mask is None else np.asarray(mask, dtype=y.dtype)
    y = np.where(w > 0, y, 0)
    n = max(float(w.sum()), 1.0)
    d = (pred.value - y) * w
    return _emit(np.asarray((d * d).sum() / n, dtype=y.dtype), (pred,),
                 lambda g: ((g * 2.0 * d / n).astype(y.dtype),))


def masked_l1(pred: Tensor, targets, mask=None) -> Tensor:
    y = np.asarray(targets, dtype=pred.value.dtype)
    w = np.ones_like(y) if mask is None else np.asarray(mask, dtype=y.dtype)
    y = np.where(w > 0, y, 0)
    n = max(float(w.sum()), 1.0)
    d = (pred.value - y) * w
    return _emit(np.asarray(np.abs(d).sum() / n, dtype=y.dtype), (pred,),
                 lambda g: ((g * np.sign(d) * w / n).astype(y.dtype),))


# -- optimization -------------------------------------------------------------

class AdamState:
    def __init__(self, params: Sequence[Tensor]):
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0


def _adam_update(params, grads, state, lr, betas, eps, weight_decay, decoupled):
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("params, grads and optimizer state differ in length")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeMismatch(f"gradient {g.shape} does not match parameter {p.shape}")
        dt = p.value.dtype.type
        if weight_decay and decoupled:
            p.value *= dt(1.0 - lr * weight_decay)
        elif weight_decay:
            g = g + dt(weight_decay) * p.value
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * g * g
        p.value -= (dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(eps))).astype(p.value.dtype)


def adamw_step(params, grads, state: AdamState, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
    """One AdamW update in place (weight decay decoupled from the gradient)."""
    _adam_update(params, grads, state, lr, betas, eps, weight_decay, decoupled=True)


def adam_step(params, grads, state: AdamState, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One Adam update in place; weight decay, if any, is added to the gradient."""
    _adam_update(params, grads, state, lr, betas, eps, weight_decay, decoupled=False)


class Optimizer:
    def __init__(self, params: Sequence[Tensor], kind: str = "adamw", lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        if kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.params = list(params)
        self.kind, self.lr, self.betas, self.eps, self.weight_decay = kind, lr, betas, eps, weight_decay
        self.state = AdamState(self.params)

    def step(self, grads: Sequence[np.ndarray]) -> None:
        step = adamw_step if self.kind == "adamw" else adam_step
        step(self.params, grads, self.state, self.lr, self.betas, self.eps, self.weight_decay)


class ReduceOnPlateau:
    """Multiply lr by ``factor`` once the metric fails to improve for more than ``patience`` epochs."""

    def __init__(self, optimizer: Optimizer, factor: float = 0.1, patience: int = 5,
                 threshold: float = 1e-4, min_lr: float = 0.0):
        self.opt, self.factor, self.patience = optimizer, factor, patience
        self.threshold, self.min_lr = threshold, min_lr
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> None:
        if self.best > 0:
            improved = metric < self.best * (1.0 - self.threshold)
        else:
            improved = metric < self.best
        if improved:
            self.best = metric
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.opt.lr = max(self.opt.lr * self.factor, self.min_lr)
            self.bad_epochs = 0


class StepDecay:
    """Multiply lr by ``gamma`` every ``step_size`` epochs."""

    def __init__(self, optimizer: Optimizer, step_size: int = 30, gamma: float = 0.3):
        self.opt, self.step_size, self.gamma = optimizer, step_size, gamma
        self.epoch = 0

    def step(self, metric: float | None = None) -> None:
        self.epoch += 1
        if self.epoch % self.step_size == 0:
            self.opt.lr *= self.gamma


# -- finite differences -------------------------------------------------------

def numeric_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> list[np.ndarray]:
    """Central finite differences of scalar ``fn()`` w.r.t. each entry of ``params``."""
    out = []
    for p in params:
        g = np.zeros(p.shape, dtype=np.float64)
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = fn().item()
            flat[i] = old - eps
            down = fn().item()
            flat[i] = old
            gflat[i] = (up - down) / (2.0 * eps)
        out.append(g)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Largest per-tensor relative error between tape gradients and finite differences."""
    with Tape(params) as tape:
        loss = fn()
    analytic = tape.backward(loss)
    numeric = numeric_gradients(fn, params, eps)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
