"""Convolutional multi-head self-attention over spatial positions.

Query, key and value are produced by 1x1 convolutions and reshaped into
``num_heads`` streams of ``head_dim`` channels over the L = H*W flattened
positions. Scaled dot-product scores are row-softmaxed, optionally thinned by
inverted dropout, used to mix the value vectors, projected back with a 1x1
convolution and added to the input as a residual.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import ShapeError, Tensor, dropout, softmax_rows
from .nn import ConvParams, conv2d, init_conv_params
from .rng import Rng

__all__ = ["AttentionConfig", "QKVProjection", "AttentionScores",
           "build_qkv_projection", "project_qkv", "attention_weights",
           "attention_apply", "cmhsa_attend", "cmhsa_forward"]

MAX_POSITIONS = 4096  # attention memory is O(L^2) per head


@dataclass(frozen=True)
class AttentionConfig:
    in_channels: int
    num_heads: int = 4
    dropout: float = 0.1
    max_positions: int = MAX_POSITIONS

    def __post_init__(self):
        if self.in_channels % self.num_heads != 0:
            raise ValueError(
                f"in_channels {self.in_channels} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.in_channels // self.num_heads

    @property
    def scale(self) -> float:
        return 1.0 / float(np.sqrt(self.head_dim))


@dataclass
class QKVProjection:
    """1x1 projections for query/key/value plus the residual output projection."""

    query: ConvParams
    key: ConvParams
    value: ConvParams
    out_proj: ConvParams

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, conv in (("query", self.query), ("key", self.key),
                           ("value", self.value), ("out_proj", self.out_proj)):
            out.append((f"{name}.weight", conv.weight))
            if conv.bias is not None:
                out.append((f"{name}.bias", conv.bias))
        return out


@dataclass
class AttentionScores:
    """Per-head position-to-position weights, all shaped [N, heads, L, L].

    ``attn`` holds the scaled dot products, ``alpha`` the row-softmax weights,
    ``alpha_prime`` the dropout-adjusted weights ``alpha * mask / (1-p)``.
    """

    attn: Tensor
    alpha: Tensor
    alpha_prime: Tensor
    mask: np.ndarray = field(repr=False)


def build_qkv_projection(cfg: AttentionConfig, rng: Rng, dtype=np.float32) -> QKVProjection:
    c = cfg.in_channels
    return QKVProjection(
        query=init_conv_params(rng.derive("query"), c, c, 1, dtype=dtype),
        key=init_conv_params(rng.derive("key"), c, c, 1, dtype=dtype),
        value=init_conv_params(rng.derive("value"), c, c, 1, dtype=dtype),
        out_proj=init_conv_params(rng.derive("out_proj"), c, c, 1, dtype=dtype),
    )


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """[N,C,H,W] -> [N, heads, L, head_dim] with L = H*W."""
    n, c, h, w = x.shape
    return x.reshape(n, heads, c // heads, h * w).transpose(0, 1, 3, 2)


def project_qkv(x: Tensor, proj: QKVProjection,
                cfg: AttentionConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Apply the 1x1 q/k/v convolutions and split into attention heads."""
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"input {x.shape} does not match configured "
                         f"channels {cfg.in_channels}")
    q = _split_heads(conv2d(x, proj.query), cfg.num_heads)
    k = _split_heads(conv2d(x, proj.key), cfg.num_heads)
    v = _split_heads(conv2d(x, proj.value), cfg.num_heads)
    return q, k, v


def attention_weights(q: Tensor, k: Tensor, cfg: AttentionConfig,
                      rng: Optional[Rng] = None, training: bool = False) -> AttentionScores:
    """Scaled dot-product scores, row softmax and inverted dropout.

    ``attn[i,j] = (q_i . k_j) / sqrt(head_dim)``; every ``alpha`` row sums
    to 1. In evaluation mode the dropout step is the identity.
    """
    if q.shape != k.shape:
        raise ShapeError(f"query shape {q.shape} differs from key shape {k.shape}")
    length = q.shape[2]
    if length > cfg.max_positions:
        raise ShapeError(f"L={length} exceeds the configured cap {cfg.max_positions}")
    attn = (q @ k.transpose(0, 1, 3, 2)) * cfg.scale
    alpha = softmax_rows(attn)
    alpha_prime, mask = dropout(alpha, cfg.dropout, rng=rng, training=training)
    return AttentionScores(attn=attn, alpha=alpha, alpha_prime=alpha_prime, mask=mask)


def attention_apply(scores: AttentionScores, v: Tensor) -> Tensor:
    """Mix values with the adjusted weights: out_i = sum_j alpha'_ij v_j."""
    if scores.alpha_prime.shape[-1] != v.shape[-2]:
        raise ShapeError(f"scores {scores.alpha_prime.shape} do not match values {v.shape}")
    return scores.alpha_prime @ v


def cmhsa_attend(x: Tensor, proj: QKVProjection, cfg: AttentionConfig,
                 rng: Optional[Rng] = None, training: bool = False) -> Tensor:
    """Attention output before the residual: out_proj(heads merged back)."""
    n, c, h, w = x.shape
    q, k, v = project_qkv(x, proj, cfg)
    scores = attention_weights(q, k, cfg, rng=rng, training=training)
    mixed = attention_apply(scores, v)                       # [N,heads,L,hd]
    merged = mixed.transpose(0, 1, 3, 2).reshape(n, c, h, w)
    return conv2d(merged, proj.out_proj)


def cmhsa_forward(x: Tensor, proj: QKVProjection, cfg: AttentionConfig,
                  rng: Optional[Rng] = None, training: bool = False) -> Tensor:
    """Residual attention block: shape-preserving on [N,C,H,W]."""
    return cmhsa_attend(x, proj, cfg, rng=rng, training=training) + x
