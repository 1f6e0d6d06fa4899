"""Reverse-mode differentiable computation over numpy arrays.

Provides exactly the primitives the rest of the pipeline needs: dense matmul,
elementwise arithmetic, GELU/ReLU, softmax, layer norm, embedding lookup,
shape ops, sum/mean reductions, and the three probabilistic ops used by the
bottleneck heads (cross entropy from logits, diagonal-Gaussian KL to a
standard normal, reparameterized sampling).

All values are float64. Every op checks that its output is finite and raises
``NonFiniteError`` naming the op otherwise. Gradients are recorded on an
explicit :class:`GradTape`; with no active tape, ops compute values only,
which is what inference paths use.
"""

from __future__ import annotations

import math
from contextvars import ContextVar
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "NonFiniteError",
    "parameter",
    "constant",
    "zeros",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "narrow",
    "embedding",
    "relu",
    "gelu",
    "exp",
    "log",
    "softmax",
    "layer_norm",
    "reduce_sum",
    "reduce_mean",
    "cross_entropy_rows",
    "cross_entropy_from_logits",
    "kl_to_standard_normal",
    "reparameterize",
    "forward_backward",
]

# tanh-approximation constant for GELU, fixed for reproducibility
GELU_COEFF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


def _check_finite(op: str, arr: np.ndarray) -> None:
    # Fast screen: NaN/Inf propagate through the sum. A finite-but-overflowing
    # sum is ruled out by the exact elementwise check before raising.
    total = float(arr.sum())
    if not math.isfinite(total) and not bool(np.all(np.isfinite(arr))):
        raise NonFiniteError(f"op '{op}' produced non-finite values")


class Tensor:
    """Numpy-backed value node. Treated as immutable once created; the
    optimizer rebinds ``.data`` to a fresh array rather than mutating it."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return NotImplemented

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64))


class _Record:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


_ACTIVE_TAPE: ContextVar["GradTape | None"] = ContextVar("vibser_tape", default=None)


class GradTape:
    """Ordered record of executed primitive ops plus, after :meth:`backward`,
    a map from tensor id to accumulated gradient.

    Replaying the records in reverse chronological order visits each op
    exactly once; recording order is a valid topological order by
    construction.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self.grads: dict[int, np.ndarray] = {}
        self._token = None

    def __enter__(self) -> "GradTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        return False

    def __len__(self) -> int:
        return len(self._records)

    def op_names(self) -> list[str]:
        return [r.op for r in self._records]

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        if loss.data.shape != ():
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        for rec in reversed(self._records):
            gout = grads.pop(id(rec.out), None)
            if gout is None:
                continue
            for tensor, gin in zip(rec.inputs, rec.backward(gout)):
                if gin is None or not tensor.requires_grad:
                    continue
                acc = grads.get(id(tensor))
                grads[id(tensor)] = gin if acc is None else acc + gin
        self.grads = grads
        return grads


def _record(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...],
            backward: Callable[[np.ndarray], tuple]) -> Tensor:
    _check_finite(op, out_data)
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._records.append(_Record(op, out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data
    ash, bsh = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _record("add", out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data
    ash, bsh = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _record("sub", out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record("mul", out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def backward(g):
        return (g * c,)

    return _record("scale", out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _record("matmul", out, (a, b), backward)


# ---------------------------------------------------------------------------
# shape ops


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"transpose expects a 2-D tensor, got shape {a.shape}")
    out = a.data.T

    def backward(g):
        return (g.T,)

    return _record("transpose", out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return _record("reshape", out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat of an empty sequence")
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tensors, backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    n = a.shape[axis]
    if start < 0 or length < 1 or start + length > n:
        raise ValueError(f"narrow out of bounds: axis {axis} [{start}:{start + length}) of {n}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = a.data[sl]
    shape = a.data.shape

    def backward(g):
        full = np.zeros(shape, dtype=np.float64)
        full[sl] = g
        return (full,)

    return _record("narrow", out, (a,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError("embedding expects a 1-D id sequence")
    if table.ndim != 2:
        raise ValueError("embedding table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError("embedding id out of range")
    out = table.data[ids]
    shape = table.data.shape

    def backward(g):
        gt = np.zeros(shape, dtype=np.float64)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record("embedding", out, (table,), backward)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _record("relu", out, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    u = _SQRT_2_OVER_PI * (x + GELU_COEFF * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du),)

    return _record("gelu", out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _record("exp", out, (a,), backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    xd = a.data

    def backward(g):
        return (g / xd,)

    return _record("log", out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", out, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ValueError("layer_norm gain/bias must match the last axis")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def backward(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        lead = tuple(range(x.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        return dx, dgain, dbias

    return _record("layer_norm", out, (a, gain, bias), backward)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=ax, keepdims=keepdims)
    shape = a.data.shape

    def backward(g):
        gg = np.asarray(g)
        if ax is not None and not keepdims:
            for d in sorted(ax):
                gg = np.expand_dims(gg, d)
        return (np.broadcast_to(gg, shape).copy(),)

    return _record("sum", out, (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, a.ndim)
    out = a.data.mean(axis=ax, keepdims=keepdims)
    shape = a.data.shape
    if ax is None:
        count = a.data.size
    else:
        count = int(np.prod([shape[d] for d in ax]))

    def backward(g):
        gg = np.asarray(g) / count
        if ax is not None and not keepdims:
            for d in sorted(ax):
                gg = np.expand_dims(gg, d)
        return (np.broadcast_to(gg, shape).copy(),)

    return _record("mean", out, (a,), backward)


# ---------------------------------------------------------------------------
# task-specific fused ops


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Per-row negative log softmax probability of the target class.

    `logits` is [M, V]; `targets` holds M class indices. Returns a [M] tensor.
    """
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    ld = logits.data
    if ld.ndim != 2:
        raise ValueError(f"cross_entropy_rows expects [M, V] logits, got {logits.shape}")
    m_rows, v = ld.shape
    if v < 2:
        raise ValueError("cross entropy needs at least 2 classes")
    if t.shape[0] != m_rows:
        raise ValueError("targets length must match the number of logit rows")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise ValueError(f"target class out of range [0, {v})")
    mx = ld.max(axis=1, keepdims=True)
    e = np.exp(ld - mx)
    lse = mx[:, 0] + np.log(e.sum(axis=1))
    rows = np.arange(m_rows)
    out = lse - ld[rows, t]

    def backward(g):
        p = e / e.sum(axis=1, keepdims=True)
        p[rows, t] -= 1.0
        return (p * np.asarray(g)[:, None],)

    return _record("cross_entropy", out, (logits,), backward)


def cross_entropy_from_logits(logits: Tensor, target: int) -> Tensor:
    """Scalar −log softmax(logits)[target] for a 1-D logit vector."""
    if logits.ndim != 1:
        raise ValueError(f"expected 1-D logits, got shape {logits.shape}")
    rows = cross_entropy_rows(reshape(logits, (1, -1)), [int(target)])
    return reshape(rows, ())


def kl_to_standard_normal(mu: Tensor, sigma: Tensor) -> Tensor:
    """0.5 * sum(mu^2 + sigma^2 - 1 - ln sigma^2) over all elements.

    For matching [d] vectors this is the KL divergence of a diagonal Gaussian
    from the standard normal; on [T, d] inputs it sums the per-frame KLs.
    """
    if mu.shape != sigma.shape:
        raise ValueError(f"mu/sigma shape mismatch: {mu.shape} vs {sigma.shape}")
    sd = sigma.data
    if np.any(sd <= 0):
        raise ValueError("sigma must be strictly positive")
    md = mu.data
    out = np.asarray(0.5 * np.sum(md ** 2 + sd ** 2 - 1.0 - 2.0 * np.log(sd)))

    def backward(g):
        g = float(g)
        return g * md, g * (sd - 1.0 / sd)

    return _record("kl_std_normal", out, (mu, sigma), backward)


def reparameterize(mu: Tensor, sigma: Tensor, noise) -> Tensor:
    """z = mu + sigma * noise. Gradient flows to mu and sigma only."""
    noise_arr = noise.data if isinstance(noise, Tensor) else np.asarray(noise, dtype=np.float64)
    if noise_arr.shape != mu.shape or mu.shape != sigma.shape:
        raise ValueError(
            f"reparameterize shape mismatch: mu {mu.shape}, sigma {sigma.shape}, "
            f"noise {noise_arr.shape}")
    return add(mu, mul(sigma, constant(noise_arr)))


# ---------------------------------------------------------------------------
# driver


def forward_backward(fn: Callable[[Mapping[str, Tensor]], Tensor],
                     params: Mapping[str, Tensor],
                     trainable: Iterable[str] | None = None,
                     ) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate `fn(params)` to a scalar loss under a fresh tape and return
    `(loss, grads)` with one gradient entry per trainable parameter.

    Parameters never touched by the graph get exact-zero gradients; parameters
    outside `trainable` are omitted from the result.
    """
    tape = GradTape()
    with tape:
        loss = fn(params)
    if not isinstance(loss, Tensor):
        raise TypeError("graph must return a Tensor")
    if loss.data.shape != ():
        raise ValueError(f"graph must evaluate to a scalar, got shape {loss.shape}")
    if not math.isfinite(float(loss.data)):
        raise NonFiniteError("loss is non-finite")
    grads_by_id = tape.backward(loss)
    names = list(params.keys()) if trainable is None else list(trainable)
    grads: dict[str, np.ndarray] = {}
    for name in names:
        p = params[name]
        g = grads_by_id.get(id(p))
        grads[name] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
    return float(loss.data), grads
