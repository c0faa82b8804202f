"""Dense f64 tensors with reverse-mode differentiation.

Every tensor produced by an op that touches a ``requires_grad`` input keeps
references to its parents and a local backward rule.  ``backward`` walks the
resulting graph once in reverse topological order and accumulates gradients
additively into the ``.grad`` buffers of leaf tensors.  Graphs are rebuilt on
every forward pass.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(RuntimeError):
    pass


class DeterminismError(RuntimeError):
    pass


BackwardRule = Callable[[np.ndarray], Iterable[tuple["Tensor", "np.ndarray | None"]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardRule | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f"{self.name}, " if self.name else ""
        return f"Tensor({label}shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, tuple(axes) if axes else None)


def parameter(data, name: str | None = None) -> Tensor:
    """Leaf tensor that owns a private copy of ``data`` and collects gradients."""
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], rule: BackwardRule) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = None
        out._parents = tuple(parents)
        out._backward = rule
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ------------------------------------------------------------------ graph


def topological_order(root: Tensor) -> list[Tensor]:
    """Differentiable nodes reachable from ``root``, inputs before consumers."""
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    upstream: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in node._backward(g):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = upstream.get(key)
            upstream[key] = pg if prev is None else prev + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def rule(g):
        return (
            (a, _unbroadcast(g, a.shape) if a.requires_grad else None),
            (b, _unbroadcast(g, b.shape) if b.requires_grad else None),
        )

    return _node(a.data + b.data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def rule(g):
        return (
            (a, _unbroadcast(g, a.shape) if a.requires_grad else None),
            (b, _unbroadcast(-g, b.shape) if b.requires_grad else None),
        )

    return _node(a.data - b.data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def rule(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape) if a.requires_grad else None),
            (b, _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
        )

    return _node(a.data * b.data, (a, b), rule)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data

    def rule(g):
        return (
            (a, _unbroadcast(g / b.data, a.shape) if a.requires_grad else None),
            (b, _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None),
        )

    return _node(out, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: ((a, -g),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: ((a, g * out),))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: ((a, g / a.data),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: ((a, g * 0.5 / out),))


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: ((a, 2.0 * g * a.data),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: ((a, g * (1.0 - out * out)),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: ((a, g * out * (1.0 - out)),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _node(out, (a,), lambda g: ((a, g * sig),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: ((a, g * mask),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU; smooth everywhere, which keeps gradient checks clean."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def rule(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return ((a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner)),)

    return _node(out, (a,), rule)


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``; no arithmetic touches either side."""
    cond = np.asarray(cond, dtype=bool)
    a, b = _lift(a), _lift(b)

    def rule(g):
        return (
            (a, _unbroadcast(np.where(cond, g, 0.0), a.shape) if a.requires_grad else None),
            (b, _unbroadcast(np.where(cond, 0.0, g), b.shape) if b.requires_grad else None),
        )

    return _node(np.where(cond, a.data, b.data), (a, b), rule)


# ------------------------------------------------------------- reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return _node(out, (a,), rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


# ---------------------------------------------------------------- shaping


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: ((a, g.reshape(a.shape)),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: ((a, np.transpose(g, inverse)),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, np.integer)) or p is Ellipsis or p is None for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    basic = _is_basic(index)

    def rule(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return ((a, full),)

    return _node(a.data[index], (a,), rule)


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table; gradients scatter-add back into the rows used."""
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def rule(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return ((table, full),)

    return _node(out, (table,), rule)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def rule(g):
        pieces = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            pieces.append((t, g[tuple(sl)]))
        return pieces

    return _node(out, tensors, rule)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# ------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ((a, ga), (b, gb))

    return _node(out, (a, b), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ------------------------------------------------------- normalizations


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} received non-finite input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return ((x, out * (g - (g * out).sum(axis=axis, keepdims=True))),)

    return _node(out, (x,), rule)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def rule(g):
        p = np.exp(out)
        return ((x, g - p * g.sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the elementwise affine."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} do not match width {width}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def rule(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = _unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gb = _unbroadcast(g, beta.shape)
        return ((x, gx), (gamma, gg), (beta, gb))

    return _node(out, (x, gamma, beta), rule)


def normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Rescale each last-axis vector to unit length, dividing by max(norm, eps)."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    guarded = np.maximum(norm, eps)
    out = x.data / guarded
    active = norm > eps

    def rule(g):
        radial = (g * out).sum(axis=-1, keepdims=True)
        gx = np.where(active, (g - out * radial) / guarded, g / guarded)
        return ((x, gx),)

    return _node(out, (x,), rule)


# ------------------------------------------------------------- utilities


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    analytic: Sequence[np.ndarray] | None = None,
) -> float:
    """Largest elementwise relative error between analytic and central-difference gradients.

    ``f`` re-evaluates the scalar loss from the current contents of ``params``;
    the parameters are perturbed in place and restored afterwards.  Relative
    error uses the denominator ``max(|analytic|, |numeric|, 1e-8)``.  Pass
    ``analytic`` to check externally supplied gradients instead of the ones
    ``backward`` produces.
    """
    if not 0.0 < step <= 1e-3:
        raise ContractError(f"finite-difference step must lie in (0, 1e-3], got {step}")
    base = f().item()
    again = f().item()
    if base != again:
        raise DeterminismError(f"loss changed between identical evaluations: {base!r} vs {again!r}")

    if analytic is None:
        for p in params:
            p.zero_grad()
        loss = f()
        backward(loss)
        analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
