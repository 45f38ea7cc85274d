"""Reverse-mode autodiff core used by every model component.

A ``Tensor`` wraps a float64 numpy array. Operations record their parents
and a backward closure on the value itself; ``Tensor.backward()`` walks the
recorded graph in reverse topological order and accumulates gradients into
``.grad``. Everything is double precision so that finite-difference checks
are meaningful; training reuses the same path (the arrays involved are
small enough that there is no reason to drop to float32).

All operations are pure: identical input values and an identical RNG
stream produce bit-identical outputs. Every freshly created value is
checked for NaN/Inf and a ``NonFiniteError`` is raised at the op that
produced the first bad value, which is how training divergence surfaces.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

_TINY = 1e-300


class ShapeMismatch(ValueError):
    """An operand shape violates an operation's contract."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class _Flags(threading.local):
    grad_enabled: bool = True


_FLAGS = _Flags()

# Stack of active multiply-accumulate counters. Matrix products report
# their MAC count to every active counter. Single-threaded use only.
_MAC_STACK: list["MacCounter"] = []


class MacCounter:
    """Counts multiply-accumulate operations of matrix products."""

    def __init__(self) -> None:
        self.total = 0

    def add(self, n: int) -> None:
        self.total += n


@contextlib.contextmanager
def count_macs():
    """Context manager that counts matmul MACs executed inside it."""
    counter = MacCounter()
    _MAC_STACK.append(counter)
    try:
        yield counter
    finally:
        _MAC_STACK.remove(counter)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (per thread) for cheap inference passes."""
    prev = _FLAGS.grad_enabled
    _FLAGS.grad_enabled = False
    try:
        yield
    finally:
        _FLAGS.grad_enabled = prev


class Tensor:
    """A float64 array with an optional backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(
                f"tensor {name or '<anon>'} contains NaN or Inf at creation"
            )
        self.data: Array = arr
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[Array], None] | None = None
        self.name = name

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: Array | None = None) -> None:
        """Accumulate gradients of this value into every reachable parent."""
        if seed is None:
            if self.data.ndim != 0:
                raise ShapeMismatch("backward() without a seed needs a scalar")
            seed = np.ones((), dtype=np.float64)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.asarray(seed, dtype=np.float64)
        for node in reversed(order):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("divide by a Tensor via mul(x, power(y, -1))")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def tensor(data) -> Tensor:
    """A constant (non-differentiable) tensor."""
    return Tensor(data)


def parameter(data, name: str) -> Tensor:
    """A named trainable tensor."""
    return Tensor(data, requires_grad=True, name=name)


def _node(data: Array, parents: tuple[Tensor, ...], bwd: Callable[[Array], None]) -> Tensor:
    """Build an op output, recording the tape only when a parent needs it."""
    # Fast screen: the sum of an array is finite iff every entry is (NaN
    # propagates and infinities either survive or cancel to NaN). The
    # elementwise recheck only runs on failure, to rule out the one false
    # positive: a genuine overflow while summing ~1e300-scale finite values.
    if not np.isfinite(data.sum()) and not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _FLAGS.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    else:
        out.requires_grad = False
        out._parents = ()
        out._bwd = None
    return out


def _acc(t: Tensor, g: Array) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = tensor(np.asarray(b, dtype=np.float64))
    out = a.data + b.data

    def bwd(g: Array) -> None:
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _node(out, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        bv = float(b)
        out = a.data * bv

        def bwd_scalar(g: Array) -> None:
            _acc(a, g * bv)

        return _node(out, (a,), bwd_scalar)
    out = a.data * b.data

    def bwd(g: Array) -> None:
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), bwd)


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise a**exponent for a fixed scalar exponent."""
    p = float(exponent)
    out = a.data ** p

    def bwd(g: Array) -> None:
        _acc(a, g * p * a.data ** (p - 1.0))

    return _node(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g: Array) -> None:
        _acc(a, g * out)

    return _node(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NonFiniteError("log of a non-positive value")
    out = np.log(a.data)

    def bwd(g: Array) -> None:
        _acc(a, g / a.data)

    return _node(out, (a,), bwd)


def clip_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient is zero on the clipped entries."""
    out = np.maximum(a.data, floor)
    mask = (a.data > floor).astype(np.float64)

    def bwd(g: Array) -> None:
        _acc(a, g * mask)

    return _node(out, (a,), bwd)


# -- shape plumbing ----------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def bwd(g: Array) -> None:
        _acc(a, g.reshape(a.data.shape))

    return _node(out, (a,), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def bwd(g: Array) -> None:
        _acc(a, g.transpose(inv))

    return _node(out, (a,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeMismatch("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g: Array) -> None:
        offset = 0
        for p, size in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + size)
            _acc(p, g[tuple(sl)])
            offset += size

    return _node(out, tuple(parts), bwd)


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along axis 0."""
    if not (0 <= start <= stop <= a.data.shape[0]):
        raise ShapeMismatch(f"row slice [{start}:{stop}] out of range for {a.shape}")
    out = a.data[start:stop].copy()

    def bwd(g: Array) -> None:
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        _acc(a, ga)

    return _node(out, (a,), bwd)


def take(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along ``axis``, dropping that axis."""
    if not (0 <= index < a.data.shape[axis]):
        raise ShapeMismatch(f"index {index} out of range on axis {axis} of {a.shape}")
    out = np.take(a.data, index, axis=axis).copy()

    def bwd(g: Array) -> None:
        ga = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = index
        ga[tuple(sl)] = g
        _acc(a, ga)

    return _node(out, (a,), bwd)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Row lookup into a 2-D table; duplicate indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeMismatch("gather_rows expects a 2-D table")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeMismatch("gather index out of range")
    out = table.data[idx]

    def bwd(g: Array) -> None:
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        _acc(table, gt)

    return _node(out, (table,), bwd)


# -- reductions --------------------------------------------------------------


def _expand_like(g: Array, shape: tuple[int, ...], axis, keepdims: bool) -> Array:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g: Array) -> None:
        _acc(a, _expand_like(g, a.data.shape, axis, keepdims).copy())

    return _node(out, (a,), bwd)


def mean_pool(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean along ``axis`` (the pooling primitive)."""
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, int):
        count = a.data.shape[axis]
    else:
        count = int(np.prod([a.data.shape[ax] for ax in axis]))

    def bwd(g: Array) -> None:
        _acc(a, _expand_like(g, a.data.shape, axis, keepdims) / count)

    return _node(out, (a,), bwd)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D or identically batched stacks of matrices."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch("matmul operands must be at least 2-D")
    if a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeMismatch(
            f"matmul batch shapes differ: {a.data.shape} vs {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = np.matmul(a.data, b.data)
    if _MAC_STACK:
        batch = int(np.prod(out.shape[:-2], dtype=np.int64)) if out.ndim > 2 else 1
        macs = batch * out.shape[-2] * out.shape[-1] * a.data.shape[-1]
        for c in _MAC_STACK:
            c.add(macs)

    def bwd(g: Array) -> None:
        _acc(a, np.matmul(g, b.data.swapaxes(-1, -2)))
        _acc(b, np.matmul(a.data.swapaxes(-1, -2), g))

    return _node(out, (a, b), bwd)


@dataclass
class LinearMap:
    """An affine map x -> x @ weight.T + bias.

    weight has shape (d_out, d_in); bias, when present, (d_out,).
    """

    weight: Tensor
    bias: Tensor | None = None

    def __post_init__(self) -> None:
        if self.weight.data.ndim != 2:
            raise ShapeMismatch("LinearMap weight must be 2-D")
        if min(self.weight.data.shape) < 1:
            raise ShapeMismatch("LinearMap dims must be positive")
        if self.bias is not None and self.bias.data.shape != (self.weight.data.shape[0],):
            raise ShapeMismatch("LinearMap bias shape must be (d_out,)")

    @property
    def d_in(self) -> int:
        return self.weight.data.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.data.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self)


def linear(x: Tensor, m: LinearMap) -> Tensor:
    """Apply an affine map to a vector (d_in,) or a stack (n, d_in)."""
    vec = x.data.ndim == 1
    if vec:
        x2 = reshape(x, (1, x.data.shape[0]))
    elif x.data.ndim == 2:
        x2 = x
    else:
        raise ShapeMismatch(f"linear expects 1-D or 2-D input, got {x.shape}")
    if x2.data.shape[1] != m.d_in:
        raise ShapeMismatch(f"linear input width {x2.data.shape[1]} != d_in {m.d_in}")
    wt = transpose(m.weight, (1, 0))
    out = matmul(x2, wt)
    if m.bias is not None:
        out = add(out, m.bias)
    if vec:
        out = reshape(out, (m.d_out,))
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g: Array) -> None:
        inner = (out * g).sum(axis=axis, keepdims=True)
        _acc(a, out * (g - inner))

    return _node(out, (a,), bwd)


def cross_entropy(scores: Tensor, label: int) -> Tensor:
    """Softmax cross-entropy of a 1-D score vector against an index label."""
    if scores.data.ndim != 1:
        raise ShapeMismatch("cross_entropy expects a 1-D score vector")
    n = scores.data.shape[0]
    label = int(label)
    if not 0 <= label < n:
        raise ShapeMismatch(f"label {label} out of range for {n} answers")
    m = scores.data.max()
    lse = m + math.log(np.exp(scores.data - m).sum())
    out = np.asarray(lse - scores.data[label])

    def bwd(g: Array) -> None:
        p = np.exp(scores.data - lse)
        p[label] -= 1.0
        _acc(scores, p * g)

    return _node(out, (scores,), bwd)


@dataclass
class AttentionParams:
    """Projections of one multi-head self-attention block."""

    wq: LinearMap
    wk: LinearMap
    wv: LinearMap
    wo: LinearMap


def multi_head_attention(x: Tensor, params: AttentionParams, heads: int) -> Tensor:
    """Multi-head self-attention over a (n, d) token stack.

    Scores are scaled by sqrt(d / heads). The output is the projected
    concatenation of the per-head mixes; residual paths and normalization
    are left to the caller.
    """
    if x.data.ndim != 2:
        raise ShapeMismatch("attention expects (n, d) tokens")
    n, d = x.data.shape
    if heads < 1 or d % heads != 0:
        raise ShapeMismatch(f"width {d} not divisible by heads {heads}")
    dk = d // heads
    q = params.wq(x)
    k = params.wk(x)
    v = params.wv(x)
    qh = transpose(reshape(q, (n, heads, dk)), (1, 0, 2))
    kt = transpose(reshape(k, (n, heads, dk)), (1, 2, 0))
    vh = transpose(reshape(v, (n, heads, dk)), (1, 0, 2))
    scores = mul(matmul(qh, kt), 1.0 / math.sqrt(dk))
    weights = softmax(scores, axis=-1)
    mixed = matmul(weights, vh)
    flat = reshape(transpose(mixed, (1, 0, 2)), (n, d))
    return params.wo(flat)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-token layer normalization with learned gain and bias."""
    mu = mean_pool(x, axis=-1, keepdims=True)
    centered = add(x, mul(mu, -1.0))
    var = mean_pool(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(centered, inv), gain), bias)


# -- parameter initialization ------------------------------------------------


def init_linear(rng: np.random.Generator, d_out: int, d_in: int, name: str,
                bias: bool = True) -> LinearMap:
    """Fan-in scaled uniform weights, zero bias."""
    bound = 1.0 / math.sqrt(d_in)
    w = parameter(rng.uniform(-bound, bound, size=(d_out, d_in)), f"{name}.weight")
    b = parameter(np.zeros(d_out), f"{name}.bias") if bias else None
    return LinearMap(w, b)


def init_table(rng: np.random.Generator, n_rows: int, d: int, name: str) -> Tensor:
    """Embedding-style table, normal with sigma 0.02."""
    return parameter(rng.normal(0.0, 0.02, size=(n_rows, d)), name)


def zero_grads(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.grad = None


# -- gradient checking -------------------------------------------------------


@dataclass
class GradCheckReport:
    """Summary of an analytic-vs-numeric gradient comparison."""

    max_rel_error: float
    worst_param: str
    worst_index: int
    analytic: float
    numeric: float
    per_param: dict[str, float] = field(default_factory=dict)
    n_evals: int = 0
    eps: float = 0.0

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance


def grad_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
               eps: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call and be deterministic for a fixed RNG stream; this is checked
    by evaluating it twice up front. Relative error uses the denominator
    max(|analytic|, |numeric|, 1e-8) per element.
    """
    first = loss_fn()
    if first.data.ndim != 0:
        raise ShapeMismatch("grad_check needs a scalar loss")
    second = loss_fn()
    if first.data.tobytes() != second.data.tobytes():
        raise ValueError("loss_fn is not deterministic; fix its RNG stream")
    zero_grads(params)
    first = loss_fn()
    first.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }

    report = GradCheckReport(0.0, "", -1, 0.0, 0.0, eps=eps)
    n_evals = 2
    for name, t in params.items():
        flat = t.data.ravel()
        a_flat = analytic[name].ravel()
        worst_here = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn().data)
            flat[i] = orig - eps
            down = float(loss_fn().data)
            flat[i] = orig
            n_evals += 2
            numeric = (up - down) / (2.0 * eps)
            a = float(a_flat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst_here = max(worst_here, rel)
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst_param = name
                report.worst_index = i
                report.analytic = a
                report.numeric = numeric
        report.per_param[name] = worst_here
    report.n_evals = n_evals
    return report
