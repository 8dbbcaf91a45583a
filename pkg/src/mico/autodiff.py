"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run tape: every op returns a new Tensor holding references to its
inputs and a closure implementing the backward rule. ``backward`` on a scalar
walks the recorded graph once in reverse topological order and accumulates
gradients into every reachable leaf with ``requires_grad=True``.

Broadcasting is deliberately limited to scalar-with-tensor; the only other
shape mix is ``add_bias`` (row vector added to every matrix row), which has
its own explicit backward rule.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Union

import numpy as np

from .errors import (
    DomainError,
    GraphError,
    NumericalError,
    OptimizerError,
    ShapeError,
)

# tanh approximation constants for gelu
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

Scalar = Union[int, float]


class Tensor:
    """A dense n-dimensional float64 array on the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "_children", "_backward", "_op",
                 "_backward_done")

    def __init__(self, data, requires_grad: bool = False,
                 _children: tuple = (), _op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if _op == "leaf" and not np.all(np.isfinite(arr)):
            raise NumericalError("tensor created from non-finite data")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._children = _children
        self._backward: Optional[Callable[[], None]] = None
        self._op = _op
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _make(data, children, op, bw_builder) -> Tensor:
    """Create an op output; record backward only if some input needs grad."""
    rg = any(c.requires_grad for c in children)
    out = Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg,
                 _children=tuple(children) if rg else (), _op=op)
    if rg:
        out._backward = bw_builder(out)
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ")


def _binary(a, b, op: str, fwd, bwd_a, bwd_b) -> Tensor:
    """Elementwise binary op; one operand may be a scalar (python or 0-d)."""
    a, b = _as_tensor(a), _as_tensor(b)
    a_scalar, b_scalar = a.data.ndim == 0, b.data.ndim == 0
    if not (a_scalar or b_scalar):
        _check_same_shape(a, b, op)
    data = fwd(a.data, b.data)

    def build(out):
        def _bw():
            g = out.grad
            ga = bwd_a(g, a.data, b.data, out.data)
            gb = bwd_b(g, a.data, b.data, out.data)
            if a_scalar and not b_scalar:
                ga = np.sum(ga)
            if b_scalar and not a_scalar:
                gb = np.sum(gb)
            _accum(a, ga)
            _accum(b, gb)
        return _bw

    return _make(data, (a, b), op, build)


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b) -> Tensor:
    return _binary(a, b, "add", lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul", lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    b_arr = _as_tensor(b).data
    if np.any(b_arr == 0.0):
        raise DomainError("div: division by zero")
    return _binary(a, b, "div", lambda x, y: x / y,
                   lambda g, x, y, o: g / y, lambda g, x, y, o: -g * x / (y * y))


def scale(a, c: Scalar) -> Tensor:
    return mul(a, float(c))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def _unary(a, op: str, fwd, deriv) -> Tensor:
    a = _as_tensor(a)
    data = fwd(a.data)

    def build(out):
        def _bw():
            _accum(a, out.grad * deriv(a.data, out.data))
        return _bw

    return _make(data, (a,), op, build)


def exp(a) -> Tensor:
    return _unary(a, "exp", np.exp, lambda x, o: o)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: operand has non-positive entries")
    return _unary(a, "log", np.log, lambda x, o: 1.0 / x)


def relu(a) -> Tensor:
    return _unary(a, "relu", lambda x: np.maximum(x, 0.0),
                  lambda x, o: (x > 0.0).astype(np.float64))


def gelu(a) -> Tensor:
    """gelu with the tanh approximation: 0.5 x (1 + tanh(c (x + a x^3)))."""
    def fwd(x):
        return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x ** 3)))

    def deriv(x, o):
        inner = _GELU_C * (x + _GELU_A * x ** 3)
        t = np.tanh(inner)
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner

    return _unary(a, "gelu", fwd, deriv)


def tanh(a) -> Tensor:
    return _unary(a, "tanh", np.tanh, lambda x, o: 1.0 - o ** 2)


def sigmoid(a) -> Tensor:
    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary(a, "sigmoid", fwd, lambda x, o: o * (1.0 - o))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(x)) = -softplus(-x), computed without overflow."""
    return _unary(a, "log_sigmoid",
                  lambda x: -np.logaddexp(0.0, -x),
                  lambda x, o: 1.0 / (1.0 + np.exp(x)))


# ---------------------------------------------------------------------------
# structural ops

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: operands must be rank-2, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.data.shape} and {b.data.shape}")
    data = a.data @ b.data

    def build(out):
        def _bw():
            g = out.grad
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)
        return _bw

    return _make(data, (a, b), "matmul", build)


def add_bias(mat, bias) -> Tensor:
    """Add a length-n row vector to every row of an (m, n) matrix."""
    mat, bias = _as_tensor(mat), _as_tensor(bias)
    if mat.data.ndim != 2 or bias.data.ndim != 1 or mat.data.shape[1] != bias.data.shape[0]:
        raise ShapeError(f"add_bias: shapes {mat.data.shape} and {bias.data.shape} incompatible")
    data = mat.data + bias.data[None, :]

    def build(out):
        def _bw():
            _accum(mat, out.grad)
            _accum(bias, out.grad.sum(axis=0))
        return _bw

    return _make(data, (mat, bias), "add_bias", build)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: rank-2 tensor required, got shape {a.data.shape}")

    def build(out):
        def _bw():
            _accum(a, out.grad.T)
        return _bw

    return _make(a.data.T, (a,), "transpose", build)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view size {a.data.size} as {shape}")

    def build(out):
        def _bw():
            _accum(a, out.grad.reshape(a.data.shape))
        return _bw

    return _make(a.data.reshape(shape), (a,), "reshape", build)


def _check_axis(a: Tensor, axis):
    if axis is not None and not (-a.data.ndim <= axis < a.data.ndim):
        raise ShapeError(f"axis {axis} out of range for rank-{a.data.ndim} tensor")


def sum_(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    _check_axis(a, axis)
    data = a.data.sum(axis=axis)

    def build(out):
        def _bw():
            g = out.grad
            if axis is None:
                _accum(a, np.broadcast_to(g, a.data.shape))
            else:
                _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape))
        return _bw

    return _make(data, (a,), "sum", build)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    _check_axis(a, axis)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def max_(a, axis=None) -> Tensor:
    """Max reduction; backward routes the full gradient to the first argmax."""
    a = _as_tensor(a)
    _check_axis(a, axis)
    data = a.data.max(axis=axis)

    def build(out):
        def _bw():
            g = out.grad
            mask = np.zeros_like(a.data)
            if axis is None:
                idx = np.unravel_index(np.argmax(a.data), a.data.shape)
                mask[idx] = 1.0
                _accum(a, mask * g)
            else:
                idx = np.argmax(a.data, axis=axis)
                grid = np.indices(data.shape)
                sel = list(grid)
                sel.insert(axis % a.data.ndim, idx)
                mask[tuple(sel)] = 1.0
                _accum(a, mask * np.expand_dims(g, axis))
        return _bw

    return _make(data, (a,), "max", build)


def softmax(a) -> Tensor:
    """Softmax over a rank-1 tensor, shift-stabilized."""
    a = _as_tensor(a)
    if a.data.ndim != 1:
        raise ShapeError(f"softmax: rank-1 tensor required, got shape {a.data.shape}")
    m = float(a.data.max())
    e = exp(sub(a, m))
    return div(e, sum_(e))


def logsumexp(a) -> Tensor:
    """log sum exp over a rank-1 tensor, shift-stabilized."""
    a = _as_tensor(a)
    if a.data.ndim != 1:
        raise ShapeError(f"logsumexp: rank-1 tensor required, got shape {a.data.shape}")
    m = float(a.data.max())
    return add(log(sum_(exp(sub(a, m)))), m)


# ---------------------------------------------------------------------------
# backward pass

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.data.ndim != 0:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise GraphError("backward: tensor is detached from the tape (requires_grad=False)")
    if loss._backward_done:
        raise GraphError("backward: repeated call on the same loss without a new forward pass")
    loss._backward_done = True

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for child in node._children:
            if child.requires_grad and id(child) not in visited:
                stack.append((child, False))

    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward()


def zero_grad(params: Iterable[Tensor]) -> None:
    """Reset gradients between training steps; leaves no stale values."""
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 2e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise OptimizerError(f"adam step: parameter {name!r} has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = self.m[name] / (1.0 - b1 ** self.t)
            v_hat = self.v[name] / (1.0 - b2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        zero_grad(self.params.values())
