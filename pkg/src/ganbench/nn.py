"""Spatial layer primitives: convolution, transposed convolution, pooling
and batch normalization, all differentiable through the autodiff engine.

Convolutions are evaluated as matrix products on unrolled patch matrices
(im2col / col2im), which keeps every reduction a fixed-order BLAS call and
therefore deterministic for a given build.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import ShapeError, Tensor, _node
from .rng import Rng

__all__ = [
    "ConvParams", "conv_output_size", "deconv_output_size",
    "conv2d", "deconv2d", "global_avg_pool", "BatchNorm2d",
    "init_conv_params", "init_deconv_params",
]


@dataclass
class ConvParams:
    """Weights of one (transposed) convolution.

    For :func:`conv2d` the weight layout is ``[C_out, C_in, kh, kw]``. For
    :func:`deconv2d` the roles of the first two axes flip: axis 0 is the
    input-channel axis, so the layout reads ``[C_in, C_out, kh, kw]``. With
    that layout the gradient of ``deconv2d`` with respect to its input is
    exactly ``conv2d`` with the same kernel array.
    """

    weight: Tensor
    bias: Optional[Tensor]
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be 4-d, got shape {self.weight.shape}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if self.bias is not None and self.bias.ndim != 1:
            raise ShapeError(f"bias must be 1-d, got shape {self.bias.shape}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """(H + 2p - k)/s + 1, requiring exact integer division."""
    span = size + 2 * padding - kernel
    if span < 0:
        raise ShapeError(f"kernel {kernel} exceeds padded input {size + 2 * padding}")
    if span % stride != 0:
        raise ShapeError(
            f"non-integer conv output: (({size} + 2*{padding} - {kernel}) / {stride})")
    return span // stride + 1


def deconv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """(H - 1)*s - 2p + k."""
    out = (size - 1) * stride - 2 * padding + kernel
    if out < 1:
        raise ShapeError(
            f"transposed conv output collapses: ({size}-1)*{stride} - 2*{padding} + {kernel}")
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """[N,C,H,W] -> [N, C*kh*kw, L] patch matrix (stride applied, no padding)."""
    n, c = x.shape[:2]
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    return windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, channels: int, kh: int, kw: int, ho: int, wo: int,
            stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches into [N,C,out_h,out_w]."""
    n = cols.shape[0]
    patches = cols.reshape(n, channels, kh, kw, ho, wo)
    out = np.zeros((n, channels, out_h, out_w), dtype=cols.dtype)
    for a in range(kh):
        for b in range(kw):
            out[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += patches[:, :, a, b]
    return out


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Strided cross-correlation of [N,C,H,W] with weight [C_out,C,kh,kw]."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [N,C,H,W], got shape {x.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = p.weight.shape
    if c != c_in:
        raise ShapeError(f"conv2d input has {c} channels, weight expects {c_in}")
    ho = conv_output_size(h, kh, p.stride, p.padding)
    wo = conv_output_size(w, kw, p.stride, p.padding)

    cols = _im2col(_pad_hw(x.data, p.padding), kh, kw, p.stride)     # [N,F,L]
    w2 = p.weight.data.reshape(c_out, -1)                            # [Co,F]
    y = np.matmul(w2[None], cols)                                    # [N,Co,L]
    if p.bias is not None:
        y = y + p.bias.data[None, :, None]
    parents = (x, p.weight) + ((p.bias,) if p.bias is not None else ())
    out = _node(y.reshape(n, c_out, ho, wo), parents, "conv2d")
    if out._record:
        stride, padding = p.stride, p.padding

        def bwd(g):
            g2 = g.reshape(n, c_out, ho * wo)
            dw = np.matmul(
                g2.transpose(1, 0, 2).reshape(c_out, -1),
                cols.transpose(0, 2, 1).reshape(-1, c_in * kh * kw),
            ).reshape(c_out, c_in, kh, kw)
            dcols = np.matmul(w2.T[None], g2)                        # [N,F,L]
            dxp = _col2im(dcols, c_in, kh, kw, ho, wo, stride,
                          h + 2 * padding, w + 2 * padding)
            dx = dxp if padding == 0 else dxp[:, :, padding:padding + h, padding:padding + w]
            if len(parents) == 3:
                return dx, dw, g.sum(axis=(0, 2, 3))
            return dx, dw

        out._backward = bwd
    return out


def deconv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Transposed convolution of [N,C,H,W] with weight [C,C_out,kh,kw].

    Output side is ``(H-1)*stride - 2*padding + kh``. The input gradient is
    ``conv2d`` with the identical kernel, stride and padding.
    """
    if x.ndim != 4:
        raise ShapeError(f"deconv2d input must be [N,C,H,W], got shape {x.shape}")
    n, c, h, w = x.shape
    c_in, c_out, kh, kw = p.weight.shape
    if c != c_in:
        raise ShapeError(f"deconv2d input has {c} channels, weight expects {c_in}")
    ho = deconv_output_size(h, kh, p.stride, p.padding)
    wo = deconv_output_size(w, kw, p.stride, p.padding)
    full_h = (h - 1) * p.stride + kh
    full_w = (w - 1) * p.stride + kw

    x2 = x.data.reshape(n, c_in, h * w)                              # [N,Ci,L]
    wd = p.weight.data.reshape(c_in, c_out * kh * kw)                # [Ci,F]
    cols = np.matmul(wd.T[None], x2)                                 # [N,F,L]
    y_full = _col2im(cols, c_out, kh, kw, h, w, p.stride, full_h, full_w)
    pad = p.padding
    y = y_full if pad == 0 else y_full[:, :, pad:pad + ho, pad:pad + wo]
    if p.bias is not None:
        y = y + p.bias.data[None, :, None, None]
    parents = (x, p.weight) + ((p.bias,) if p.bias is not None else ())
    out = _node(y, parents, "deconv2d")
    if out._record:
        stride = p.stride

        def bwd(g):
            if pad == 0:
                g_full = g
            else:
                g_full = np.zeros((n, c_out, full_h, full_w), dtype=g.dtype)
                g_full[:, :, pad:pad + ho, pad:pad + wo] = g
            gcols = _im2col(g_full, kh, kw, stride)                  # [N,F,L]
            dx = np.matmul(wd[None], gcols).reshape(n, c_in, h, w)
            dw = np.matmul(
                x2.transpose(1, 0, 2).reshape(c_in, -1),
                gcols.transpose(0, 2, 1).reshape(-1, c_out * kh * kw),
            ).reshape(c_in, c_out, kh, kw)
            if len(parents) == 3:
                return dx, dw, g.sum(axis=(0, 2, 3))
            return dx, dw

        out._backward = bwd
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per sample and channel: [N,C,H,W] -> [N,C,1,1]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be [N,C,H,W], got shape {x.shape}")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("global_avg_pool requires H, W >= 1")
    out = _node(x.data.mean(axis=(2, 3), keepdims=True), (x,), "global_avg_pool")
    if out._record:
        inv = x.data.dtype.type(1.0 / (h * w))
        out._backward = lambda g: (np.broadcast_to(g * inv, x.shape).copy(),)
    return out


class BatchNorm2d:
    """Per-channel batch normalization with affine scale and shift.

    Training mode normalizes with batch statistics (biased variance) and
    updates the running buffers in place; evaluation mode normalizes with the
    running buffers. The running buffers are training state, not parameters:
    they carry no gradient and follow single-writer semantics.
    """

    def __init__(self, channels: int, dtype=np.float32, eps: float = 1e-5,
                 momentum: float = 0.1, rng: Optional[Rng] = None):
        dtype = np.dtype(dtype)
        if rng is None:
            gamma = np.ones(channels, dtype=dtype)
        else:
            gamma = rng.normal(channels, loc=1.0, scale=0.02, dtype=dtype)
        self.gamma = Tensor(gamma, requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.gamma.size:
            raise ShapeError(
                f"batchnorm expects [N,{self.gamma.size},H,W], got shape {x.shape}")
        if x.data.dtype != self.gamma.data.dtype:
            raise TypeError(f"batchnorm dtype {self.gamma.data.dtype} does not match "
                            f"input dtype {x.data.dtype}")
        dt = x.data.dtype
        n, c, h, w = x.shape
        m = n * h * w
        gamma = self.gamma.data[None, :, None, None]
        if training:
            mean = x.data.mean(axis=(0, 2, 3))
            var = x.data.var(axis=(0, 2, 3))
            mom = dt.type(self.momentum)
            self.running_mean += mom * (mean - self.running_mean)
            self.running_var += mom * (var - self.running_var)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + dt.type(self.eps))
        x_hat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = gamma * x_hat + self.beta.data[None, :, None, None]
        out = _node(y, (x, self.gamma, self.beta), "batchnorm2d")
        if out._record:
            inv4 = inv_std[None, :, None, None]

            def bwd(g):
                dbeta = g.sum(axis=(0, 2, 3))
                dgamma = (g * x_hat).sum(axis=(0, 2, 3))
                dxhat = g * gamma
                if training:
                    dx = (inv4 / dt.type(m)) * (
                        dt.type(m) * dxhat
                        - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                        - x_hat * (dxhat * x_hat).sum(axis=(0, 2, 3), keepdims=True)
                    )
                else:
                    dx = dxhat * inv4
                return dx, dgamma, dbeta

            out._backward = bwd
        return out

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


def init_conv_params(rng: Rng, c_in: int, c_out: int, kernel: int, stride: int = 1,
                     padding: int = 0, dtype=np.float32, bias: bool = True,
                     init_std: float = 0.02) -> ConvParams:
    """Conv weights drawn N(0, init_std), zero bias."""
    dtype = np.dtype(dtype)
    weight = Tensor(rng.normal((c_out, c_in, kernel, kernel), scale=init_std, dtype=dtype),
                    requires_grad=True)
    b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None
    return ConvParams(weight=weight, bias=b, stride=stride, padding=padding)


def init_deconv_params(rng: Rng, c_in: int, c_out: int, kernel: int, stride: int = 1,
                       padding: int = 0, dtype=np.float32, bias: bool = True,
                       init_std: float = 0.02) -> ConvParams:
    """Transposed-conv weights ([C_in, C_out, k, k] layout) drawn N(0, init_std)."""
    dtype = np.dtype(dtype)
    weight = Tensor(rng.normal((c_in, c_out, kernel, kernel), scale=init_std, dtype=dtype),
                    requires_grad=True)
    b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None
    return ConvParams(weight=weight, bias=b, stride=stride, padding=padding)
