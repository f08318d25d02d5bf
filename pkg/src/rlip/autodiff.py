"""Dense-tensor reverse-mode automatic differentiation.

A small define-by-run engine on top of numpy: every op returns a new
``Tensor`` that remembers its parents and a closure propagating gradients
to them. All arithmetic runs in float64; checkpoints may store float32
(see ``training``).

Conventions:
  - gradients accumulate additively across uses of a tensor,
  - broadcasting follows numpy; gradients are summed back over
    broadcast axes,
  - ``backward`` may only be called on scalar tensors.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True
_FINITE_CHECKS = True


class no_grad:
    """Context manager disabling graph construction (cheap eval forwards)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def set_finite_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf guard applied to every op result."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = enabled


def finite_checks_enabled() -> bool:
    return _FINITE_CHECKS


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def _check_finite(data: np.ndarray, what: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """A dense float64 array node in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, _op)
        self.requires_grad = requires_grad and _GRAD_ENABLED
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents if self.requires_grad else ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op

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
        return float(self.data)

    def detach(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- graph traversal ---------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; accumulates into ``.grad``."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward on a tensor that does not require grad")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                _check_finite(node.grad, f"grad of {node._op}")

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad += grad

    # -- operator sugar ----------------------------------------------------

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(data, parents: tuple[Tensor, ...], op: str, backward) -> Tensor:
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=tuple(p for p in parents if p.requires_grad), _op=op)
    if req:
        out._backward = backward
    return out


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), "sub", backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), "neg", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), "div", backward)


def power(a, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = as_tensor(a)
    out_data = a.data**exponent

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _make(out_data, (a,), "power", backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), "log", backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), "exp", backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), "sqrt", backward)


def tabs(a) -> Tensor:
    """Elementwise absolute value; subgradient 0 at the kink."""
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), "abs", backward)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    out_data = np.where(pick_a, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * pick_a, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~pick_a, b.shape))

    return _make(out_data, (a, b), "maximum", backward)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    out_data = np.where(pick_a, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * pick_a, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~pick_a, b.shape))

    return _make(out_data, (a, b), "minimum", backward)


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor) against a scalar constant."""
    a = as_tensor(a)
    mask = a.data > floor

    def backward(g):
        a._accumulate(g * mask)

    return _make(np.maximum(a.data, floor), (a,), "clamp_min", backward)


# -- nonlinearities ------------------------------------------------------------


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = 0.5 * (1.0 + np.tanh(0.5 * a.data))  # stable for both tails

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), "sigmoid", backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), "tanh", backward)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    a = as_tensor(a)
    out_data = np.logaddexp(0.0, a.data)

    def backward(g):
        a._accumulate(g * 0.5 * (1.0 + np.tanh(0.5 * a.data)))

    return _make(out_data, (a,), "softplus", backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Gaussian error linear unit (tanh form): smooth, so finite-difference
    gradient checks stay clean away from exact zeros."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    return _make(out_data, (a,), "gelu", backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - inner))

    return _make(out_data, (a,), "softmax", backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward(g):
        soft = np.exp(out_data)
        a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), "log_softmax", backward)


# -- shape ops -----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product (numpy @ semantics on the last two axes)."""
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), "matmul", backward)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), "transpose", backward)


def swap_last2(a) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old_shape = a.shape

    def backward(g):
        a._accumulate(g.reshape(old_shape))

    return _make(a.data.reshape(shape), (a,), "reshape", backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    return _make(out_data, tuple(parts), "concat", backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a._accumulate(full)

    return _make(a.data[idx], (a,), "narrow", backward)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))

    return _make(np.broadcast_to(a.data, shape), (a,), "broadcast_to", backward)


def gather_rows(a, indices) -> Tensor:
    """Select rows along axis 0; backward scatter-adds into the source."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(a.data[idx], (a,), "gather_rows", backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g if (axis is None or keepdims) else np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gg, a.shape))

    return _make(out_data, (a,), "sum", backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def layer_norm(a, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = xhat * gain.data + bias.data
    n = a.shape[-1]

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=tuple(range(g.ndim - 1))))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=tuple(range(g.ndim - 1))))
        if a.requires_grad:
            gx = g * gain.data
            t1 = gx.sum(axis=-1, keepdims=True)
            t2 = (gx * xhat).sum(axis=-1, keepdims=True)
            a._accumulate(inv * (gx - t1 / n - xhat * t2 / n))

    return _make(out_data, (a, gain, bias), "layer_norm", backward)


# -- parameter registry & verification ----------------------------------------


class Parameters:
    """Named registry of leaf tensors (the trainable state of a model)."""

    def __init__(self):
        self._store: dict[str, Tensor] = {}

    def create(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._store:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._store[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._store[name]

    def __contains__(self, name: str) -> bool:
        return name in self._store

    def __len__(self) -> int:
        return len(self._store)

    def names(self) -> list[str]:
        return list(self._store)

    def items(self):
        return self._store.items()

    def tensors(self) -> list[Tensor]:
        return list(self._store.values())

    def zero_grad(self) -> None:
        for t in self._store.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._store.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        for name, value in arrays.items():
            if name not in self._store:
                if strict:
                    raise KeyError(f"unknown parameter: {name}")
                continue
            target = self._store[name]
            if target.shape != value.shape:
                raise ValueError(f"shape mismatch for {name}: {target.shape} vs {value.shape}")
            target.data = np.asarray(value, dtype=np.float64).copy()


def gradient_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor],
                   epsilon: float = 1e-5, samples_per_param: int = 4,
                   rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call. Returns the max over sampled coordinates of
    ``|analytic - fd| / max(1e-8, |analytic| + |fd|)``; 0.0 for an empty
    parameter set.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = [p for p in params if p.requires_grad]
    if not params:
        return 0.0
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= samples_per_param else rng.choice(n, size=samples_per_param, replace=False)
        for c in coords:
            keep = flat[c]
            with no_grad():
                flat[c] = keep + epsilon
                hi = loss_fn().item()
                flat[c] = keep - epsilon
                lo = loss_fn().item()
            flat[c] = keep
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise NonFiniteError("non-finite loss under perturbation")
            fd = (hi - lo) / (2 * epsilon)
            a = ana.reshape(-1)[c]
            err = abs(a - fd) / max(1e-8, abs(a) + abs(fd))
            worst = max(worst, err)
    return worst
