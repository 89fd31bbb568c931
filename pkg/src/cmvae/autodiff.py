"""Minimal reverse-mode automatic differentiation over dense f64 arrays.

A ``Tensor`` wraps a numpy float64 array together with the closures needed to
push gradients back to its parents.  Graphs are built fresh per evaluation
(tape style) and torn down by ``backward``; recorded values are never mutated
in place.  Reductions use numpy's fixed evaluation order, so re-running an
identical graph yields bit-identical results.

Scalars are Tensors of shape ``()``.  Only f64 is supported; mixed precision
would invalidate the tolerances the downstream estimators are tested at.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when operand shapes cannot be combined."""

    def __init__(self, op: str, shape_a, shape_b):
        super().__init__(f"{op}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}")
        self.shapes = (tuple(shape_a), tuple(shape_b))


class GraphCycleError(RuntimeError):
    """Raised if backward encounters a cycle (should be impossible for taped graphs)."""


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        raise TypeError("expected raw array-like, got Tensor")
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Node in the differentiation graph: value, gradient slot, parent links."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "name")

    def __init__(self, value, requires_grad: bool = False, parents=(), name: str | None = None):
        self.value = _as_array(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p, _ in parents)
        # parents: sequence of (Tensor, vjp) where vjp maps upstream grad -> parent grad
        self._parents = tuple((p, fn) for p, fn in parents if p.requires_grad)
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def param(value, name: str | None = None) -> "Tensor":
        return Tensor(value, requires_grad=True, name=name)

    @staticmethod
    def const(value) -> "Tensor":
        return Tensor(value, requires_grad=False)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}{tag})"

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    # -- arithmetic ------------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor.const(other)

    def __add__(self, other):
        other = self._coerce(other)
        val = _ew("add", self.value, other.value, np.add)
        return Tensor(val, parents=(
            (self, lambda g: _unbroadcast(g, self.value.shape)),
            (other, lambda g: _unbroadcast(g, other.value.shape)),
        ))

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        val = _ew("subtract", self.value, other.value, np.subtract)
        return Tensor(val, parents=(
            (self, lambda g: _unbroadcast(g, self.value.shape)),
            (other, lambda g: _unbroadcast(-g, other.value.shape)),
        ))

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        other = self._coerce(other)
        val = _ew("multiply", self.value, other.value, np.multiply)
        a, b = self.value, other.value
        return Tensor(val, parents=(
            (self, lambda g: _unbroadcast(g * b, a.shape)),
            (other, lambda g: _unbroadcast(g * a, b.shape)),
        ))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        val = _ew("divide", self.value, other.value, np.divide)
        a, b = self.value, other.value
        return Tensor(val, parents=(
            (self, lambda g: _unbroadcast(g / b, a.shape)),
            (other, lambda g: _unbroadcast(-g * a / (b * b), b.shape)),
        ))

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __neg__(self):
        return Tensor(-self.value, parents=((self, lambda g: -g),))

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self.value, other.value
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatchError("matmul", a.shape, b.shape)
        return Tensor(a @ b, parents=(
            (self, lambda g: g @ b.T),
            (other, lambda g: a.T @ g),
        ))

    # -- elementwise nonlinearities ---------------------------------------------

    def exp(self):
        out = np.exp(self.value)
        return Tensor(out, parents=((self, lambda g: g * out),))

    def log(self):
        val = self.value
        return Tensor(np.log(val), parents=((self, lambda g: g / val),))

    def tanh(self):
        out = np.tanh(self.value)
        return Tensor(out, parents=((self, lambda g: g * (1.0 - out * out)),))

    def sigmoid(self):
        out = 1.0 / (1.0 + np.exp(-self.value))
        return Tensor(out, parents=((self, lambda g: g * out * (1.0 - out)),))

    def clamp(self, lo: float | None = None, hi: float | None = None):
        """Elementwise clip; gradient passes only where the value was kept."""
        val = np.clip(self.value, lo, hi)
        mask = np.ones_like(self.value)
        if lo is not None:
            mask = mask * (self.value > lo)
        if hi is not None:
            mask = mask * (self.value < hi)
        return Tensor(val, parents=((self, lambda g: g * mask),))

    def floor_at(self, lo: float):
        """Elementwise maximum with a constant; gradient passes where above."""
        mask = (self.value > lo).astype(np.float64)
        return Tensor(np.maximum(self.value, lo), parents=((self, lambda g: g * mask),))

    # -- shape ops ---------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.value.shape
        return Tensor(self.value.reshape(shape), parents=((self, lambda g: g.reshape(old)),))

    def __getitem__(self, idx):
        val = self.value[idx]

        def vjp(g, idx=idx, shape=self.value.shape):
            out = np.zeros(shape)
            out[idx] = g
            return out

        return Tensor(val, parents=((self, vjp),))

    # -- reductions ----------------------------------------------------------------

    def sum(self, axis=None):
        shape = self.value.shape

        def vjp(g):
            if axis is None:
                return np.full(shape, g, dtype=np.float64) if np.ndim(g) == 0 else np.broadcast_to(g, shape).copy()
            return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

        return Tensor(self.value.sum(axis=axis), parents=((self, vjp),))

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def logsumexp(self, axis: int = -1):
        """Stable log-sum-exp along one axis; gradient is the softmax."""
        if self.value.size == 0:
            raise ValueError("logsumexp of empty tensor")
        m = np.max(self.value, axis=axis, keepdims=True)
        shifted = (self - Tensor.const(m)).exp()
        return shifted.sum(axis=axis).log() + Tensor.const(np.squeeze(m, axis=axis))


def _ew(op: str, a: np.ndarray, b: np.ndarray, fn) -> np.ndarray:
    try:
        return fn(a, b)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along an axis; the gradient splits back to the parts."""
    vals = [t.value for t in tensors]
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * vals[0].ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return Tensor(np.concatenate(vals, axis=axis),
                  parents=tuple((t, make_vjp(i)) for i, t in enumerate(tensors)))


def affine(x: Tensor | np.ndarray, w: Tensor, b: Tensor) -> Tensor:
    """Row-wise linear map ``x @ w + b``; accepts a constant batch for x."""
    if not isinstance(x, Tensor):
        x = Tensor.const(x)
    return x @ w + b


def logsumexp(values) -> Tensor:
    """Stable log-sum-exp of a flat vector, as a scalar Tensor.

    Returns max(v) + log sum exp(v - max); safe for entries up to +-1e6.
    """
    t = values if isinstance(values, Tensor) else Tensor.const(values)
    if t.value.ndim != 1:
        t = t.reshape(t.value.size)
    if t.value.size == 0:
        raise ValueError("logsumexp of empty vector")
    return t.logsumexp(axis=0)


def backward(loss: Tensor, params=None) -> dict:
    """Reverse-sweep from a scalar loss.

    Populates ``.grad`` on every reachable Tensor that requires grad and
    returns a dict mapping each requested parameter to its gradient (zeros
    for parameters the loss does not depend on).  Each node is visited
    exactly once, in reverse topological order.
    """
    if loss.value.ndim != 0:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.value.shape}")

    order: list[Tensor] = []
    state: dict[int, int] = {}  # 0 = on stack, 1 = done
    stack: list[tuple[Tensor, int]] = [(loss, 0)]
    while stack:
        node, pi = stack.pop()
        nid = id(node)
        if pi == 0:
            if state.get(nid) == 1:
                continue
            if state.get(nid) == 0:
                raise GraphCycleError("cycle detected in differentiation graph")
            state[nid] = 0
        parents = node._parents
        if pi < len(parents):
            stack.append((node, pi + 1))
            stack.append((parents[pi][0], 0))
        else:
            state[nid] = 1
            order.append(node)

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and not node._parents:
            node.grad = g if node.grad is None else node.grad + g
        for parent, vjp in node._parents:
            pg = vjp(g)
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg

    out = {}
    if params is not None:
        items = params.items() if isinstance(params, dict) else ((getattr(p, "name", i), p) for i, p in enumerate(params))
        for key, p in items:
            out[key] = p.grad if p.grad is not None else np.zeros_like(p.value)
    return out


def zero_grads(params) -> None:
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None


def finite_difference_check(f, params: dict, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps the parameter dict to a scalar Tensor and must be
    deterministic given fixed noise inputs.  Error per coordinate is
    |fd - grad| / (|grad| + 1e-8); the max over all coordinates is returned.
    """
    zero_grads(params)
    loss = f(params)
    if not np.isfinite(loss.value):
        raise FloatingPointError("objective is non-finite at the evaluation point")
    grads = backward(loss, params)

    worst = 0.0
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        flat = p.value.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            hi = float(f(params).value)
            flat[i] = keep - h
            lo = float(f(params).value)
            flat[i] = keep
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError("objective is non-finite during differencing")
            fd = (hi - lo) / (2.0 * h)
            err = abs(fd - gflat[i]) / (abs(gflat[i]) + 1e-8)
            worst = max(worst, err)
    return worst
