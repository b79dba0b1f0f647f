"""
Convolution kernels on the autodiff engine.

Windows are gathered with a fixed (kh, kw) loop and contracted with
`np.tensordot`, so the reduction order never depends on thread count.
"""
import numpy as np

from errors import ShapeError
from tensor import Function, Tensor, as_tensor, pad


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(B, C, H, W) -> (B, C, kh, kw, ho, wo) strided patches."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return cols


def _scatter(cols: np.ndarray, shape: tuple, stride: int) -> np.ndarray:
    """Adjoint of `_windows`: accumulate patches back into a (B, C, H, W) grid."""
    kh, kw, ho, wo = cols.shape[2:]
    out = np.zeros(shape)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += cols[:, :, i, j]
    return out


class Conv2d(Function):
    def forward(self, x, w, b, stride=1):
        self.stride = stride
        kh, kw = w.shape[2:]
        ho = (x.shape[2] - kh) // stride + 1
        wo = (x.shape[3] - kw) // stride + 1
        self.cols = _windows(x, kh, kw, stride, ho, wo)
        out = np.tensordot(self.cols, w, axes=([1, 2, 3], [1, 2, 3]))
        return out.transpose(0, 3, 1, 2) + b[None, :, None, None]

    def backward(self, grad):
        x, w, _ = self.tensors
        grad_w = np.tensordot(grad, self.cols, axes=([0, 2, 3], [0, 4, 5]))
        grad_b = grad.sum(axis=(0, 2, 3))
        grad_cols = np.tensordot(grad, w.data, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
        grad_x = _scatter(grad_cols, x.shape, self.stride)
        return grad_x, grad_w, grad_b


class Deconv2d(Function):
    """Transposed convolution; kernel layout (C_in, C_out, kh, kw)."""

    def forward(self, x, w, b, stride=1, padding=0, output_padding=0):
        self.stride, self.padding = stride, padding
        kh, kw = w.shape[2:]
        h, wd = x.shape[2:]
        self.full = (
            (h - 1) * stride + kh + output_padding,
            (wd - 1) * stride + kw + output_padding,
        )
        cols = np.tensordot(x, w, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
        out = _scatter(cols, (x.shape[0], w.shape[1]) + self.full, stride)
        out = out[:, :, padding:self.full[0] - padding, padding:self.full[1] - padding]
        return out + b[None, :, None, None]

    def backward(self, grad):
        x, w, _ = self.tensors
        p = self.padding
        kh, kw = w.shape[2:]
        grad_full = np.zeros(grad.shape[:2] + self.full)
        grad_full[:, :, p:self.full[0] - p, p:self.full[1] - p] = grad
        cols = _windows(grad_full, kh, kw, self.stride, x.shape[2], x.shape[3])
        grad_x = np.tensordot(cols, w.data, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
        grad_w = np.tensordot(x.data, cols, axes=([0, 2, 3], [0, 4, 5]))
        grad_b = grad.sum(axis=(0, 2, 3))
        return grad_x, grad_w, grad_b


def _check(x: Tensor, kernel: Tensor, in_axis: int, op: str):
    if x.ndim != 4:
        raise ShapeError(f"{op}: input must be (B, C, H, W), got {x.shape}", "rank")
    if kernel.ndim != 4:
        raise ShapeError(f"{op}: kernel must be rank 4, got {kernel.shape}", "kernel rank")
    if x.shape[1] != kernel.shape[in_axis]:
        raise ShapeError(
            f"{op}: input has {x.shape[1]} channels, kernel expects {kernel.shape[in_axis]}",
            "input channels",
        )


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    pad_mode: str = "zeros",
) -> Tensor:
    """Cross-correlation with (C_out, C_in, kh, kw) kernels; `pad_mode` is zeros or reflect."""
    _check(x, kernel, 1, "conv2d")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be positive, got {stride}", "stride")
    if bias is None:
        bias = Tensor(np.zeros(kernel.shape[0]))
    x = pad(x, padding, pad_mode)
    if x.shape[2] < kernel.shape[2] or x.shape[3] < kernel.shape[3]:
        raise ShapeError(f"conv2d: padded input {x.shape[2:]} smaller than kernel", "spatial")
    return Conv2d.apply(x, kernel, as_tensor(bias), stride=stride)


def deconv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Transposed convolution: the gradient of conv2d w.r.t. its input, run forward."""
    _check(x, kernel, 0, "deconv2d")
    if stride < 1:
        raise ShapeError(f"deconv2d: stride must be positive, got {stride}", "stride")
    if bias is None:
        bias = Tensor(np.zeros(kernel.shape[1]))
    return Deconv2d.apply(
        x, kernel, as_tensor(bias),
        stride=stride, padding=padding, output_padding=output_padding,
    )
