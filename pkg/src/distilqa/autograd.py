"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record their parents and a backward closure; :func:`backward`
orders the recorded graph into a :class:`Tape` and replays it in reverse.
Nothing is recorded when no input requires a gradient, so inference runs
on plain numpy arrays with no graph overhead.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float64

# Finite stand-in for -inf on masked logits; keeps 0 * logit finite.
NEG_INF = -1e9


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateError(ValueError):
    """A reduction or normalization has nothing to act on."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph bookkeeping -------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        # Gradients are never updated in place, so aliasing g is safe.
        if self.grad is None:
            g = np.asarray(g)
            if g.dtype != self.data.dtype:
                g = g.astype(self.data.dtype)
            self.grad = g.reshape(self.data.shape)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        backward(self)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


ArrayLike = Tensor | np.ndarray | float | int


def as_tensor(x: ArrayLike, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = fn
    return out


def _coerce_pair(a: ArrayLike, b: ArrayLike) -> tuple[Tensor, Tensor]:
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    ref = ta.dtype if ta is not None else tb.dtype if tb is not None else DEFAULT_DTYPE
    if ta is None:
        ta = Tensor(np.asarray(a, dtype=ref))
    if tb is None:
        tb = Tensor(np.asarray(b, dtype=ref))
    return ta, tb


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _coerce_pair(a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _coerce_pair(a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _coerce_pair(a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), bw)


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return _result(out, (a,), lambda g: a._accumulate(g * p * a.data ** (p - 1)))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: a._accumulate(g * out))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))


def gelu(t: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the standard normal CDF via erf."""
    x = t.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out = x * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        t._accumulate(g * (cdf + x * pdf))

    return _result(out, (t,), bw)


def masked_fill(t: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by ``value`` (no gradient there)."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, t.data.dtype.type(value), t.data)

    def bw(g):
        t._accumulate(unbroadcast(np.where(mask, 0.0, g), t.shape))

    return _result(out, (t,), bw)


# -- shape ------------------------------------------------------------------

def reshape(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = t.shape
    return _result(t.data.reshape(shape), (t,), lambda g: t._accumulate(g.reshape(src)))


def transpose(t: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(t.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(t.data.transpose(axes), (t,), lambda g: t._accumulate(g.transpose(inv)))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(t: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(t.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        t._accumulate(full)

    return _result(t.data[idx], (t,), bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; gradients scatter-add back into the rows."""
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        weight._accumulate(full)

    return _result(weight.data[ids], (weight,), bw)


# -- reductions -------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, t.ndim)
    out = t.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        t._accumulate(np.broadcast_to(g, t.shape))

    return _result(np.asarray(out), (t,), bw)


def reduce_mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, t.ndim)
    n = int(np.prod([t.shape[a] for a in axes])) if axes else 1
    return reduce_sum(t, axis, keepdims) * (1.0 / n)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                b._accumulate(unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _result(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- normalization ----------------------------------------------------------

def _check_row_mask(mask, shape) -> np.ndarray:
    m = np.broadcast_to(np.asarray(mask, dtype=bool), shape)
    if not m.any(axis=-1).all():
        raise DegenerateError("softmax over a fully masked row")
    return m


def softmax_lastdim(t: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; masked-out positions get probability 0.

    ``mask`` is True where an entry is kept and must broadcast against ``t``.
    """
    x = t.data
    if mask is not None:
        m = _check_row_mask(mask, x.shape)
        x = np.where(m, x, -np.inf)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        t._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _result(p, (t,), bw)


def log_softmax_lastdim(t: Tensor) -> Tensor:
    x = t.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def bw(g):
        t._accumulate(g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return _result(out, (t,), bw)


def layer_norm(t: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = t.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs features {d}")
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if t.requires_grad:
            gx = g * gamma.data
            t._accumulate(
                rstd * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            )

    return _result(out, (t, gamma, beta), bw)


# -- losses -----------------------------------------------------------------

def mse(a: Tensor, b: ArrayLike, mask=None) -> Tensor:
    """Mean squared error, averaged over positions where ``mask`` is True."""
    a, b = _coerce_pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ {a.shape} vs {b.shape}")
    if mask is None:
        diff = sub(a, b)
        return reduce_mean(mul(diff, diff))
    m = np.asarray(mask, dtype=bool)
    if m.shape != a.shape:
        raise ShapeError(f"mse: mask shape {m.shape} vs operand shape {a.shape}")
    count = int(m.sum())
    if count == 0:
        raise DegenerateError("mse: every position is masked")
    diff = sub(a, b)
    return reduce_sum(mul(mul(diff, diff), m.astype(a.dtype))) * (1.0 / count)


def soft_cross_entropy(student_logits: Tensor, teacher_probs: ArrayLike, temperature: float = 1.0) -> Tensor:
    """Mean over rows of ``-sum(p_teacher * log_softmax(student / T))``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    p = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs)
    if p.shape != student_logits.shape:
        raise ShapeError(f"soft_cross_entropy: {student_logits.shape} vs {p.shape}")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("soft_cross_entropy: teacher rows must sum to 1")
    logp = log_softmax_lastdim(student_logits * (1.0 / temperature))
    rows = int(np.prod(p.shape[:-1])) if p.ndim > 1 else 1
    return -reduce_sum(mul(logp, p.astype(student_logits.dtype))) * (1.0 / rows)


# -- backward ---------------------------------------------------------------

class Tape:
    """Recorded operations of one graph, in topological order (inputs first)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self) -> None:
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def release(self) -> None:
        for node in self.nodes:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node.grad = None


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every leaf that contributed to ``loss``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.from_root(loss)
    loss.grad = np.ones_like(loss.data)
    tape.replay()
    if not retain_graph:
        tape.release()


# -- verification -----------------------------------------------------------

def finite_diff_check(
    f: Callable[[Tensor | Sequence[Tensor]], Tensor],
    x: Tensor | Sequence[Tensor],
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``x`` may be one tensor or a list of tensors; ``f`` is called with ``x``
    itself. Coordinates are perturbed in place and restored afterwards, so
    ``f`` may equally close over ``x`` (e.g. model parameters).
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved_flags = [t.requires_grad for t in xs]
    for t in xs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    loss = f(x)
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
    worst = 0.0
    try:
        for t, ga in zip(xs, analytic):
            flat = t.data.reshape(-1)
            ga_flat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(f(x).data)
                flat[i] = orig - step
                fm = float(f(x).data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * step)
                denom = max(abs(ga_flat[i]), abs(num), 1e-8)
                worst = max(worst, abs(ga_flat[i] - num) / denom)
    finally:
        for t, flag in zip(xs, saved_flags):
            t.requires_grad = flag
            t.grad = None
    return worst


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)
