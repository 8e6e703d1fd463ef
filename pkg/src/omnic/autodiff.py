"""Dense-array engine with reverse-mode differentiation.

Tensors wrap row-major numpy buffers (f32 or f64). Operations executed while
gradients are enabled append records to a global tape; ``backward`` replays
the tape in exact reverse execution order, which makes gradient accumulation
order deterministic across runs.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, StateError

DTYPES = {"f32": np.float32, "f64": np.float64}
_NP_TO_NAME = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class Tape:
    """Ordered record of executed operations, consumed by one backward pass."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False


_active_tape = Tape()
_grad_enabled = True


def active_tape() -> Tape:
    return _active_tape


def reset_tape() -> None:
    """Discard all pending records and start a fresh tape."""
    global _active_tape
    _active_tape = Tape()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / data prep)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense n-dimensional array with optional gradient tape participation."""

    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, dtype: str | None = None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = _NP_TO_NAME.get(arr.dtype, "f32")
        if dtype not in DTYPES:
            raise ContractError(f"unsupported dtype {dtype!r}")
        self.data = np.ascontiguousarray(arr, dtype=DTYPES[dtype])
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._leaf = True

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> str:
        return _NP_TO_NAME[self.data.dtype]

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.dtype)

    def astype(self, dtype: str) -> "Tensor":
        return Tensor(self.data, dtype=dtype, requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return add(self, mul_scalar(_coerce(other, self), -1.0))

    def __rsub__(self, other):
        return add(_coerce(other, self), mul_scalar(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, 1.0 / float(other))
        raise ContractError("tensor/tensor division is not in the operator set")

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise ContractError(f"expected scalar tensor, got shape {t.shape}")


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=like.dtype)


def _check_dtypes(*tensors: Tensor) -> str:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise DimensionError(f"dtype mismatch: {dt} vs {t.dtype}")
    return dt


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    """Attach a backward record if any input participates in the tape."""
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        _active_tape.records.append((out, inputs, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    out = Tensor(a.data + b.data, dtype=a.dtype)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    out = Tensor(a.data * b.data, dtype=a.dtype)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), backward)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s, dtype=a.dtype)

    def backward(g):
        return (g * s,)

    return _record(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    _check_dtypes(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data), dtype=a.dtype)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), backward)


# -- activations --------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0), dtype=x.dtype)

    def backward(g):
        return (g * (x.data > 0),)

    return _record(out, (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU with the tanh approximation."""
    inner = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x.data * (1.0 + t), dtype=x.dtype)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * dinner
        return (g * dx,)

    return _record(out, (x,), backward)


# -- normalization ------------------------------------------------------------


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise DimensionError("softmax needs a non-empty last dimension")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax input contains non-finite values")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s, dtype=x.dtype)

    def backward(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (x,), backward)


def logsumexp_lastdim(x: Tensor) -> Tensor:
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    se = e.sum(axis=-1, keepdims=True)
    out = Tensor((np.log(se) + m).squeeze(-1), dtype=x.dtype)

    def backward(g):
        return (np.expand_dims(g, -1) * (e / se),)

    return _record(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-dim slice to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm parameter shape mismatch: x last dim {d}, gain {gain.shape}, bias {bias.shape}"
        )
    _check_dtypes(x, gain, bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data, dtype=x.dtype)

    def backward(g):
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), backward)


def l2_normalize_lastdim(x: Tensor, eps: float = 1e-12) -> Tensor:
    n = np.sqrt((x.data**2).sum(axis=-1, keepdims=True))
    if (n < eps).any():
        raise NumericError("cannot l2-normalize a zero vector")
    y = x.data / n
    out = Tensor(y, dtype=x.dtype)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - y * dot) / n,)

    return _record(out, (x,), backward)


# -- reductions ---------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum()), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    return mul_scalar(sum_all(x), 1.0 / x.size)


def sum_lastdim(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum(axis=-1), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, -1), x.shape).copy(),)

    return _record(out, (x,), backward)


def mean_axis0(x: Tensor) -> Tensor:
    out = Tensor(x.data.mean(axis=0), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g / x.shape[0], x.shape).copy(),)

    return _record(out, (x,), backward)


# -- shape manipulation -------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(shape), dtype=x.dtype)

    def backward(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)), dtype=x.dtype)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _record(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    _check_dtypes(*tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), dtype=tensors[0].dtype)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = Tensor(np.ascontiguousarray(x.data[index]), dtype=x.dtype)

    def backward(g):
        full = np.zeros(x.shape, dtype=x.data.dtype)
        full[index] = g
        return (full,)

    return _record(out, (x,), backward)


def take_lastdim(x: Tensor, indices: np.ndarray) -> Tensor:
    """Select columns of the last axis: out[..., j] = x[..., indices[j]]."""
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[-1]):
        raise DimensionError(f"index out of range for last dim of size {x.shape[-1]}")
    out = Tensor(x.data[..., indices], dtype=x.dtype)

    def backward(g):
        gx = np.zeros(x.shape, dtype=x.data.dtype)
        np.add.at(gx.reshape(-1, x.shape[-1]), (slice(None), indices), g.reshape(-1, indices.size))
        return (gx,)

    return _record(out, (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding id out of range for table with {table.shape[0]} rows")
    out = Tensor(table.data[ids], dtype=table.dtype)

    def backward(g):
        gt = np.zeros(table.shape, dtype=table.data.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(out, (table,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood from raw logits (B x K) and int targets."""
    targets = np.asarray(targets)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects 2-d logits, got {logits.shape}")
    if targets.shape != (logits.shape[0],):
        raise DimensionError("cross_entropy target count must match batch size")
    b, k = logits.shape
    m = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    lse = np.log(e.sum(axis=-1)) + m[:, 0]
    nll = lse - logits.data[np.arange(b), targets]
    out = Tensor(np.asarray(nll.mean()), dtype=logits.dtype)

    def backward(g):
        p = e / e.sum(axis=-1, keepdims=True)
        p[np.arange(b), targets] -= 1.0
        return (g * p / b,)

    return _record(out, (logits,), backward)


# -- backward pass ------------------------------------------------------------


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate gradients of a scalar loss into every reachable leaf."""
    global _active_tape
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else _active_tape
    if tape.consumed:
        raise StateError("tape already consumed by a previous backward pass")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        input_grads = fn(g)
        for inp, gi in zip(inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._leaf:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
    if tape is _active_tape:
        _active_tape = Tape()


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- verification harness -----------------------------------------------------


def finite_diff_grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    h: float = 1e-5,
    tol: float = 1e-4,
    entries_per_param: int | None = None,
    seed: int = 0,
) -> dict:
    """Compare tape gradients of ``fn()`` against central differences.

    ``fn`` must be a deterministic scalar function of ``params``, each given
    as a (name, tensor) pair in f64. When ``entries_per_param`` is set, only a
    seeded random subset of entries is perturbed per parameter; otherwise all
    entries are checked. Returns a report with the per-parameter max relative
    error and an overall pass flag.
    """
    rng = np.random.default_rng(seed)
    for name, p in params:
        if p.dtype != "f64":
            raise ContractError(f"grad check requires f64 parameters, {name} is {p.dtype}")
        p.requires_grad = True
        p.grad = None
    reset_tape()
    loss = fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("objective returned a non-finite value")
    backward(loss)

    errors: dict[str, float] = {}
    with no_grad():
        for name, p in params:
            flat = p.data.reshape(-1)
            gflat = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
            n = flat.size
            if entries_per_param is None or entries_per_param >= n:
                idx = np.arange(n)
            else:
                idx = rng.choice(n, size=entries_per_param, replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                f_plus = fn().item()
                flat[i] = orig - h
                f_minus = fn().item()
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NumericError("objective returned a non-finite value")
                num = (f_plus - f_minus) / (2 * h)
                # floor keeps central-difference noise on (near-)zero
                # gradients from registering as relative error
                denom = max(abs(num), abs(gflat[i]), 1e-3)
                worst = max(worst, abs(num - gflat[i]) / denom)
            errors[name] = worst
    max_err = max(errors.values()) if errors else 0.0
    return {"per_param": errors, "max_rel_err": max_err, "passed": max_err < tol}
