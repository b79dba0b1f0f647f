"""
Dense float64 tensors with reverse-mode autodiff.

A `Tensor` wraps a numpy array; every differentiable op is a `Function`
subclass with a `forward` on raw arrays and a `backward` returning one
gradient (or None) per input. `backward(loss)` walks the recorded graph in
a fixed topological order, so gradient accumulation is deterministic.
"""
from contextlib import contextmanager
from typing import Optional, Sequence

import numpy as np
from scipy import special

from errors import DomainError, ShapeError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording (inference, table building)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Function:
    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs) -> "Tensor":
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = _GRAD_ENABLED and any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=requires_grad, creator=func if requires_grad else None)

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
        """Sum out the axes numpy broadcasting expanded."""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


class Tensor:
    def __init__(
        self,
        data,
        requires_grad: bool = False,
        creator: Optional[Function] = None,
        dtype=np.float64,
    ):
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.creator = creator
        self.grad: Optional[np.ndarray] = None

    # ── Introspection ──────────────────────────────────────────────
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ── Arithmetic ─────────────────────────────────────────────────
    def __add__(self, other):
        return Add.apply(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, as_tensor(other))

    def __rsub__(self, other):
        return Sub.apply(as_tensor(other), self)

    def __mul__(self, other):
        return Mul.apply(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, as_tensor(other))

    def __rtruediv__(self, other):
        return Div.apply(as_tensor(other), self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return MatMul.apply(self, as_tensor(other))

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    # ── Elementwise ────────────────────────────────────────────────
    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def softplus(self):
        return Softplus.apply(self)

    def leaky_relu(self, slope: float = 0.2):
        return LeakyRelu.apply(self, slope=slope)

    def clamp_min(self, low: float):
        return ClampMin.apply(self, low=low)

    def clamp(self, low: float, high: float):
        return Clamp.apply(self, low=low, high=high)

    def tanh(self):
        return Tanh.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def ndtr(self):
        return Ndtr.apply(self)

    # ── Reductions / shape ─────────────────────────────────────────
    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        return Transpose.apply(self, axes=axes)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ─────────────────────────────────────────────
# BACKWARD PASS
# ─────────────────────────────────────────────
def backward(loss: Tensor):
    """Populate `.grad` on every leaf reachable from a scalar loss (accumulating)."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}", "loss")

    order, seen, stack = [], set(), [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.creator is not None:
            for parent in reversed(node.creator.tensors):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.creator is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node.creator.tensors, node.creator.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad


# ─────────────────────────────────────────────
# BINARY OPS
# ─────────────────────────────────────────────
def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot combine {a.shape} and {b.shape}", "broadcast") from exc


class Add(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, "add")
        return a + b

    def backward(self, grad):
        a, b = self.tensors
        return self.unbroadcast(grad, a.shape), self.unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, "sub")
        return a - b

    def backward(self, grad):
        a, b = self.tensors
        return self.unbroadcast(grad, a.shape), self.unbroadcast(-grad, b.shape)


class Mul(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, "mul")
        return a * b

    def backward(self, grad):
        a, b = self.tensors
        return (
            self.unbroadcast(grad * b.data, a.shape),
            self.unbroadcast(grad * a.data, b.shape),
        )


class Div(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, "div")
        if np.any(b == 0):
            raise DomainError("division by zero")
        return a / b

    def backward(self, grad):
        a, b = self.tensors
        return (
            self.unbroadcast(grad / b.data, a.shape),
            self.unbroadcast(-grad * a.data / (b.data * b.data), b.shape),
        )


class MatMul(Function):
    """Batched matrix product with numpy broadcasting over leading axes."""

    def forward(self, a, b):
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.tensors
        grad_a = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return self.unbroadcast(grad_a, a.shape), self.unbroadcast(grad_b, b.shape)


# ─────────────────────────────────────────────
# UNARY OPS
# ─────────────────────────────────────────────
class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        if np.any(a <= 0):
            raise DomainError("log of a non-positive value")
        return np.log(a)

    def backward(self, grad):
        return (grad / self.tensors[0].data,)


class Softplus(Function):
    def forward(self, a):
        return np.logaddexp(0.0, a)

    def backward(self, grad):
        return (grad * special.expit(self.tensors[0].data),)


class LeakyRelu(Function):
    # at exactly 0 the negative-side slope applies
    def forward(self, a, slope=0.2):
        self.slope = slope
        return np.where(a > 0, a, slope * a)

    def backward(self, grad):
        return (grad * np.where(self.tensors[0].data > 0, 1.0, self.slope),)


class ClampMin(Function):
    def forward(self, a, low=0.0):
        self.low = low
        return np.maximum(a, low)

    def backward(self, grad):
        return (grad * (self.tensors[0].data > self.low),)


class Clamp(Function):
    def forward(self, a, low=0.0, high=1.0):
        self.low, self.high = low, high
        return np.clip(a, low, high)

    def backward(self, grad):
        a = self.tensors[0].data
        return (grad * ((a > self.low) & (a < self.high)),)


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class Sigmoid(Function):
    def forward(self, a):
        self.out = special.expit(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Ndtr(Function):
    """Standard normal CDF."""

    def forward(self, a):
        return special.ndtr(a)

    def backward(self, grad):
        a = self.tensors[0].data
        return (grad * np.exp(-0.5 * a * a) / np.sqrt(2.0 * np.pi),)


# ─────────────────────────────────────────────
# REDUCTIONS / SHAPE
# ─────────────────────────────────────────────
class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.axis, self.keepdims = axis, keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        shape = self.tensors[0].shape
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, tuple(np.atleast_1d(self.axis)))
        return (np.broadcast_to(grad, shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape=()):
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.tensors[0].shape),)


class Transpose(Function):
    def forward(self, a, axes=()):
        self.axes = axes or tuple(reversed(range(a.ndim)))
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, a, index=None):
        self.index = index
        return a[index]

    def backward(self, grad):
        out = np.zeros_like(self.tensors[0].data)
        np.add.at(out, self.index, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis=1):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Softmax(Function):
    def forward(self, a, axis=1):
        self.axis = axis
        shifted = a - np.max(a, axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / np.sum(e, axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        dot = np.sum(grad * self.out, axis=self.axis, keepdims=True)
        return (self.out * (grad - dot),)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    base = tensors[0].shape
    for t in tensors[1:]:
        for dim, (x, y) in enumerate(zip(base, t.shape)):
            if dim != axis % len(base) and x != y:
                raise ShapeError(f"concat: {base} vs {t.shape}", f"axis {dim}")
    return Concat.apply(*tensors, axis=axis)


def softmax(t: Tensor, axis: int = 1) -> Tensor:
    return Softmax.apply(t, axis=axis)


# ─────────────────────────────────────────────
# POINTWISE DISPATCH
# ─────────────────────────────────────────────
_UNARY = {
    "leaky_relu": lambda t, *args: t.leaky_relu(*args),
    "softplus": lambda t: t.softplus(),
    "exp": lambda t: t.exp(),
    "log": lambda t: t.log(),
    "clamp_min": lambda t, low: t.clamp_min(low),
}
_BINARY = {
    "add": Add,
    "mul": Mul,
    "sub": Sub,
    "div": Div,
}


def pointwise(t: Tensor, fn: str, *args) -> Tensor:
    if fn in _UNARY:
        return _UNARY[fn](t, *args)
    if fn in _BINARY:
        (other,) = args
        return _BINARY[fn].apply(t, as_tensor(other))
    raise ValueError(f"unknown pointwise fn {fn!r}")


# ─────────────────────────────────────────────
# SPATIAL RESAMPLING
# ─────────────────────────────────────────────
class Separable(Function):
    """out = Mh · x · Mwᵀ over the last two axes (padding, subsampling, interpolation)."""

    def forward(self, a, mh=None, mw=None):
        self.mh, self.mw = mh, mw
        return np.matmul(np.matmul(mh, a), mw.T)

    def backward(self, grad):
        return (np.matmul(np.matmul(self.mh.T, grad), self.mw),)


class SpaceToDepth(Function):
    def forward(self, a, r=2):
        self.r = r
        b, c, h, w = a.shape
        out = a.reshape(b, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
        return out.reshape(b, c * r * r, h // r, w // r)

    def backward(self, grad):
        return (_depth_to_space(grad, self.r),)


class DepthToSpace(Function):
    def forward(self, a, r=2):
        self.r = r
        return _depth_to_space(a, r)

    def backward(self, grad):
        return (SpaceToDepth().forward(grad, r=self.r),)


def _depth_to_space(a: np.ndarray, r: int) -> np.ndarray:
    b, c, h, w = a.shape
    out = a.reshape(b, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return out.reshape(b, c // (r * r), h * r, w * r)


def _reflect_index(n: int, pad: int) -> np.ndarray:
    positions = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(positions)
    period = 2 * (n - 1)
    folded = np.mod(positions, period)
    return np.where(folded > n - 1, period - folded, folded)


def _take_matrix(index: np.ndarray, n: int) -> np.ndarray:
    """One-hot rows; index -1 gives an all-zero row."""
    m = np.zeros((len(index), n))
    valid = index >= 0
    m[np.nonzero(valid)[0], index[valid]] = 1.0
    return m


def _pad_matrix(n: int, pad: int, mode: str) -> np.ndarray:
    if mode == "reflect":
        return _take_matrix(_reflect_index(n, pad), n)
    if mode == "zeros":
        index = np.arange(-pad, n + pad)
        return _take_matrix(np.where((index >= 0) & (index < n), index, -1), n)
    raise ValueError(f"unknown padding mode {mode!r}")


def _bilinear_matrix(n: int, r: int, preserve_mass: bool) -> np.ndarray:
    """Half-pixel-centred linear interpolation with edge clamping, n -> n·r."""
    m = np.zeros((n * r, n))
    for i in range(n * r):
        src = min(max((i + 0.5) / r - 0.5, 0.0), n - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    if preserve_mass:
        # every source sample hands out exactly its own mass
        m /= m.sum(axis=0, keepdims=True)
    return m


def pad(t: Tensor, amount: int, mode: str = "reflect") -> Tensor:
    if amount == 0:
        return t
    h, w = t.shape[-2:]
    return Separable.apply(t, mh=_pad_matrix(h, amount, mode), mw=_pad_matrix(w, amount, mode))


def _require_divisible(t: Tensor, r: int, mode: str):
    h, w = t.shape[-2:]
    if h % r:
        raise ShapeError(f"{mode}: height {h} not divisible by {r}", "height")
    if w % r:
        raise ShapeError(f"{mode}: width {w} not divisible by {r}", "width")


def space_to_depth(t: Tensor, r: int) -> Tensor:
    if r == 1:
        return t
    _require_divisible(t, r, "space_to_depth")
    return SpaceToDepth.apply(t, r=r)


def depth_to_space(t: Tensor, r: int) -> Tensor:
    if r == 1:
        return t
    if t.shape[1] % (r * r):
        raise ShapeError(f"depth_to_space: {t.shape[1]} channels not divisible by {r * r}", "channels")
    return DepthToSpace.apply(t, r=r)


def resample(t: Tensor, mode: str, r: int) -> Tensor:
    """
    Spatial rearrangement / rescaling by an integer factor r.

    Modes: space_to_depth, depth_to_space, nearest_down, bilinear_up and
    bilinear_up_mass (bilinear interpolation whose output sums to the input
    total, i.e. values scaled by 1/r²).
    """
    if mode == "space_to_depth":
        return space_to_depth(t, r)
    if mode == "depth_to_space":
        return depth_to_space(t, r)
    h, w = t.shape[-2:]
    if mode == "nearest_down":
        _require_divisible(t, r, mode)
        return Separable.apply(
            t,
            mh=_take_matrix(np.arange(0, h, r), h),
            mw=_take_matrix(np.arange(0, w, r), w),
        )
    if mode in ("bilinear_up", "bilinear_up_mass"):
        keep = mode == "bilinear_up_mass"
        return Separable.apply(t, mh=_bilinear_matrix(h, r, keep), mw=_bilinear_matrix(w, r, keep))
    raise ValueError(f"unknown resample mode {mode!r}")
