"""Channel-attention upsampling block (USE): squeeze, excitation, channel
weighting, then transposed-convolution upsampling.

The squeeze step pools each channel to its spatial mean, the excitation path
pushes that descriptor through a two-conv bottleneck (C -> C/2 -> C, 1x1
kernels) ending in a sigmoid, the resulting per-channel weights rescale the
input map, and a stride-2 transposed convolution doubles the spatial size.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, relu, sigmoid
from .nn import (ConvParams, conv2d, deconv2d, global_avg_pool,
                 init_conv_params, init_deconv_params)
from .rng import Rng

__all__ = ["ChannelDescriptor", "ChannelAttention", "UseBlock",
           "build_use_block", "squeeze", "excite", "channel_weight", "use_forward"]


@dataclass
class ChannelDescriptor:
    """Per-channel spatial means, shape [N,C,1,1]."""
    z: Tensor


@dataclass
class ChannelAttention:
    """Per-channel gate in (0,1), shape [N,C,1,1]."""
    a: Tensor


@dataclass
class UseBlock:
    """Parameters of one USE block.

    ``reduce_conv`` maps C -> C/2 and ``expand_conv`` maps C/2 -> C, both 1x1
    with bias; ``upsample`` is the stride-2 transposed convolution. The
    excitation bottleneck ratio is fixed at 2.
    """

    in_channels: int
    out_channels: int
    reduce_conv: ConvParams
    expand_conv: ConvParams
    upsample: ConvParams

    def __post_init__(self):
        c = self.in_channels
        if c < 2 or c % 2 != 0:
            raise ValueError(f"USE block needs an even channel count >= 2, got {c}")
        k, s, p = self.upsample.weight.shape[2], self.upsample.stride, self.upsample.padding
        if s != 2 or k - 2 * p != 2:
            raise ValueError(
                f"USE upsampling must double the spatial size; k={k}, s={s}, p={p} does not")

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, conv in (("reduce_conv", self.reduce_conv),
                           ("expand_conv", self.expand_conv),
                           ("upsample", self.upsample)):
            out.append((f"{name}.weight", conv.weight))
            if conv.bias is not None:
                out.append((f"{name}.bias", conv.bias))
        return out


def build_use_block(in_channels: int, out_channels: int, rng: Rng,
                    dtype=np.float32, kernel: int = 4) -> UseBlock:
    """USE block with N(0, 0.02) weights; upsample kernel 4, stride 2, pad 1."""
    if in_channels % 2 != 0:
        raise ValueError(f"USE block needs an even channel count, got {in_channels}")
    mid = in_channels // 2
    return UseBlock(
        in_channels=in_channels,
        out_channels=out_channels,
        reduce_conv=init_conv_params(rng.derive("reduce"), in_channels, mid, 1, dtype=dtype),
        expand_conv=init_conv_params(rng.derive("expand"), mid, in_channels, 1, dtype=dtype),
        upsample=init_deconv_params(rng.derive("upsample"), in_channels, out_channels,
                                    kernel, stride=2, padding=kernel // 2 - 1, dtype=dtype),
    )


def squeeze(x: Tensor) -> ChannelDescriptor:
    """Global average pool each channel: [N,C,H,W] -> descriptor [N,C,1,1]."""
    return ChannelDescriptor(z=global_avg_pool(x))


def excite(z: ChannelDescriptor, block: UseBlock) -> ChannelAttention:
    """sigmoid(expand(relu(reduce(z)))); every gate lies strictly in (0,1)."""
    if z.z.ndim != 4 or z.z.shape[1] != block.in_channels:
        raise ShapeError(
            f"descriptor with {z.z.shape} does not match block channels {block.in_channels}")
    hidden = relu(conv2d(z.z, block.reduce_conv))
    return ChannelAttention(a=sigmoid(conv2d(hidden, block.expand_conv)))


def channel_weight(x: Tensor, a: ChannelAttention) -> Tensor:
    """Rescale each channel of x by its gate, broadcast over spatial positions."""
    if x.ndim != 4 or a.a.ndim != 4 or x.shape[1] != a.a.shape[1]:
        raise ShapeError(f"channel mismatch between map {x.shape} and gates {a.a.shape}")
    return x * a.a


def use_forward(x: Tensor, block: UseBlock) -> Tensor:
    """Full block: squeeze -> excite -> channel weighting -> upsample.

    [N,C,H,W] -> [N,C_out,2H,2W].
    """
    gates = excite(squeeze(x), block)
    return deconv2d(channel_weight(x, gates), block.upsample)
