"""Dense-tensor math with reverse-mode automatic differentiation.

Define-by-run: every forward op records a closure that propagates the
adjoint to its inputs, and ``backward`` replays the tape in reverse
topological order. Only what the rest of the pipeline needs is provided:
CPU arrays, first derivatives, float32/float64.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "parameter",
    "matmul",
    "tanh",
    "sin",
    "cos",
    "exp",
    "sqrt",
    "softmax",
    "layer_norm",
    "mse",
    "concat",
    "stack",
    "backward",
    "SGD",
    "Adam",
    "finite_difference_gradient",
]


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested op."""


class NonFiniteError(FloatingPointError):
    """A graph output contained NaN or Inf."""


def _as_array(value, dtype=None):
    arr = np.asarray(value, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An n-d float array plus an optional gradient buffer and tape link."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    # -- introspection ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad: np.ndarray):
        grad = grad.astype(self.data.dtype, copy=False)
        self.grad = grad if self.grad is None else self.grad + grad

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = _wrap(other, self.dtype)
        out = _make(self.data + other.data, (self, other))
        if out._parents:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g, other.shape))
            out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _make(-self.data, (self,))
        if out._parents:
            out._backward = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other):
        other = _wrap(other, self.dtype)
        out = _make(self.data - other.data, (self, other))
        if out._parents:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.shape))
                if other.requires_grad:
                    other._accumulate(-_unbroadcast(g, other.shape))
            out._backward = bwd
        return out

    def __rsub__(self, other):
        return _wrap(other, self.dtype) - self

    def __mul__(self, other):
        other = _wrap(other, self.dtype)
        out = _make(self.data * other.data, (self, other))
        if out._parents:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g * other.data, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g * self.data, other.shape))
            out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other, self.dtype)
        out = _make(self.data / other.data, (self, other))
        if out._parents:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g / other.data, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(-g * self.data / other.data**2, other.shape))
            out._backward = bwd
        return out

    def __rtruediv__(self, other):
        return _wrap(other, self.dtype) / self

    def __pow__(self, exponent: float):
        if not np.isscalar(exponent):
            raise ShapeError("pow supports scalar exponents only")
        out = _make(self.data**exponent, (self,))
        if out._parents:
            out._backward = lambda g: self._accumulate(g * exponent * self.data ** (exponent - 1))
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    # -- structure -------------------------------------------------------

    def __getitem__(self, index):
        out = _make(self.data[index], (self,))
        if out._parents:
            def bwd(g):
                full = np.zeros_like(self.data)
                np.add.at(full, index, g)
                self._accumulate(full)
            out._backward = bwd
        return out

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _make(self.data.reshape(shape), (self,))
        if out._parents:
            out._backward = lambda g: self._accumulate(g.reshape(self.shape))
        return out

    def swapaxes(self, a: int, b: int):
        out = _make(self.data.swapaxes(a, b), (self,))
        if out._parents:
            out._backward = lambda g: self._accumulate(g.swapaxes(a, b))
        return out

    def sum(self, axis=None, keepdims: bool = False):
        out = _make(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out._parents:
            def bwd(g):
                if axis is None:
                    self._accumulate(np.broadcast_to(g, self.shape).copy())
                else:
                    if not keepdims:
                        g = np.expand_dims(g, axis)
                    self._accumulate(np.broadcast_to(g, self.shape).copy())
            out._backward = bwd
        return out

    def mean(self, axis=None, keepdims: bool = False):
        count = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def _make(data: np.ndarray, parents) -> Tensor:
    tracked = tuple(p for p in parents if p.requires_grad)
    return Tensor(data, requires_grad=bool(tracked), _parents=tracked)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def tensor(data, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def parameter(data, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


# -- ops -----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = _make(a.data @ b.data, (a, b))
    if out._parents:
        def bwd(g):
            if a.requires_grad:
                if b.ndim == 1:
                    ga = np.multiply.outer(g, b.data) if g.ndim else g * b.data
                else:
                    ga = g @ b.data.swapaxes(-1, -2)
                a._accumulate(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                if a.ndim == 1:
                    gb = np.multiply.outer(a.data, g) if g.ndim else a.data * g
                else:
                    gb = a.data.swapaxes(-1, -2) @ g
                b._accumulate(_unbroadcast(gb, b.shape))
        out._backward = bwd
    return out


def _unary(x: Tensor, value: np.ndarray, local_grad) -> Tensor:
    out = _make(value, (x,))
    if out._parents:
        out._backward = lambda g: x._accumulate(g * local_grad())
    return out


def tanh(x: Tensor) -> Tensor:
    value = np.tanh(x.data)
    return _unary(x, value, lambda: 1.0 - value**2)


def sin(x: Tensor) -> Tensor:
    return _unary(x, np.sin(x.data), lambda: np.cos(x.data))


def cos(x: Tensor) -> Tensor:
    return _unary(x, np.cos(x.data), lambda: -np.sin(x.data))


def exp(x: Tensor) -> Tensor:
    value = np.exp(x.data)
    return _unary(x, value, lambda: value)


def sqrt(x: Tensor) -> Tensor:
    value = np.sqrt(x.data)
    return _unary(x, value, lambda: 0.5 / value)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)
    out = _make(value, (x,))
    if out._parents:
        def bwd(g):
            dot = (g * value).sum(axis=axis, keepdims=True)
            x._accumulate(value * (g - dot))
        out._backward = bwd
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError("layer_norm: gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv
    value = normed * gain.data + bias.data
    out = _make(value, (x, gain, bias))
    if out._parents:
        def bwd(g):
            n = x.shape[-1]
            if gain.requires_grad:
                gain._accumulate((g * normed).reshape(-1, n).sum(axis=0))
            if bias.requires_grad:
                bias._accumulate(g.reshape(-1, n).sum(axis=0))
            if x.requires_grad:
                gh = g * gain.data
                x._accumulate(inv / n * (n * gh - gh.sum(axis=-1, keepdims=True)
                                         - normed * (gh * normed).sum(axis=-1, keepdims=True)))
        out._backward = bwd
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    diff = a - b
    return (diff * diff).mean()


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out._parents:
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def bwd(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                if t.requires_grad:
                    t._accumulate(piece)
        out._backward = bwd
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out = _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors))
    if out._parents:
        def bwd(g):
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    t._accumulate(np.take(g, i, axis=axis))
        out._backward = bwd
    return out


# -- reverse pass --------------------------------------------------------


def backward(root: Tensor):
    """Populate ``grad`` on every reachable tensor with requires_grad.

    ``root`` must be scalar and finite; re-running on a freshly built graph
    with the same values yields identical gradients.
    """
    if root.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    if not np.isfinite(root.data).all():
        raise NonFiniteError("graph output is NaN or Inf")

    order: list[Tensor] = []
    seen = set()
    work = [(root, False)]
    while work:
        node, done = work.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        work.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                work.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- optimizers ----------------------------------------------------------


class SGD:
    """Plain gradient descent: p <- p - lr * g."""

    def __init__(self, params, lr: float):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.steps = 0

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise ValueError("parameter has no gradient; run backward first")
            p.data -= self.lr * p.grad
            p.grad = None
        self.steps += 1


class Adam:
    """Adam with bias-corrected first/second moments."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                raise ValueError("parameter has no gradient; run backward first")
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**self.steps)
            v_hat = v / (1 - b2**self.steps)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None


# -- verification helper ---------------------------------------------------


def finite_difference_gradient(fn, inputs, eps: float = 1e-5):
    """Central-difference gradients of scalar ``fn(*inputs)`` w.r.t. each input.

    Independent of the tape: evaluates the forward function only. Returns a
    list of arrays matching the input shapes.
    """
    grads = []
    for i, x in enumerate(inputs):
        g = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = float(fn(*inputs).data)
            flat[j] = orig - eps
            lo = float(fn(*inputs).data)
            flat[j] = orig
            gflat[j] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads
