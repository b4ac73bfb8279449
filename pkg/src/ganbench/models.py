"""Generator/discriminator assembly for the four-variant ablation family.

All variants share the same transposed-convolution generator ladder
(latent -> 4x4 -> ... -> S x S) and an identical convolutional
discriminator. The variants differ only inside the generator:

* ``DCGAN``            plain ladder
* ``USE-GAN``          one mid-stack upsampling block replaced by a USE block
* ``CMHSA-GAN``        one attention block inserted between two stages
* ``USE-CMHSA-GAN``    both modifications together

Construction is a pure function of the config (including its seed): two
builds from the same config have bit-identical parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import (AttentionConfig, QKVProjection, build_qkv_projection,
                        cmhsa_forward)
from .autodiff import ShapeError, Tensor, leaky_relu, relu, sigmoid, tanh
from .nn import (BatchNorm2d, ConvParams, conv2d, deconv2d, init_conv_params,
                 init_deconv_params)
from .rng import Rng
from .use import UseBlock, build_use_block, use_forward

__all__ = ["VARIANTS", "ModelConfig", "Generator", "Discriminator", "build_model"]

VARIANTS = ("DCGAN", "USE-GAN", "CMHSA-GAN", "USE-CMHSA-GAN")

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class ModelConfig:
    variant: str = "DCGAN"
    latent_dim: int = 100
    base_width: int = 64
    img_channels: int = 3
    img_size: int = 64
    num_heads: int = 4
    dropout: float = 0.1
    seed: int = 0
    dtype: str = "float32"
    use_position: Optional[int] = None
    cmhsa_position: Optional[int] = None

    @property
    def has_use(self) -> bool:
        return self.variant in ("USE-GAN", "USE-CMHSA-GAN")

    @property
    def has_attention(self) -> bool:
        return self.variant in ("CMHSA-GAN", "USE-CMHSA-GAN")

    @property
    def stages(self) -> int:
        return int(np.log2(self.img_size)) - 2

    @property
    def stem_channels(self) -> int:
        return self.base_width << (self.stages - 1)

    def resolved_use_position(self) -> int:
        return self.stages - 2 if self.use_position is None else self.use_position

    def resolved_cmhsa_position(self) -> int:
        if self.cmhsa_position is None:
            return max(self.stages - 3, 0)
        return self.cmhsa_position

    def np_dtype(self):
        return _DTYPES[self.dtype]

    def problems(self) -> list[str]:
        """All constraint violations, empty when the config is buildable."""
        out: list[str] = []
        if self.variant not in VARIANTS:
            out.append(f"variant must be one of {', '.join(VARIANTS)}; got {self.variant!r}")
        s = self.img_size
        if s < 16 or (s & (s - 1)) != 0:
            out.append(f"img_size must be a power of two >= 16, got {s}")
        if self.latent_dim < 1:
            out.append(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.base_width < 1:
            out.append(f"base_width must be >= 1, got {self.base_width}")
        if self.img_channels < 1:
            out.append(f"img_channels must be >= 1, got {self.img_channels}")
        if not 0.0 <= self.dropout < 1.0:
            out.append(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.dtype not in _DTYPES:
            out.append(f"dtype must be float32 or float64, got {self.dtype!r}")
        if out:
            return out

        n_stages = self.stages
        if self.has_use:
            pos = self.resolved_use_position()
            if not 0 <= pos <= n_stages - 2:
                out.append(f"use_position {pos} outside the inner stages [0, {n_stages - 2}]")
            else:
                c_in = self.stem_channels >> pos
                if c_in < 2 or c_in % 2 != 0:
                    out.append(f"USE block at stage {pos} sees {c_in} channels; "
                               "an even count >= 2 is required")
        if self.has_attention:
            pos = self.resolved_cmhsa_position()
            if not 0 <= pos <= n_stages - 2:
                out.append(f"cmhsa_position {pos} outside the inner stages [0, {n_stages - 2}]")
            else:
                channels = self.stem_channels >> (pos + 1)
                side = 4 << (pos + 1)
                if channels % self.num_heads != 0:
                    out.append(f"attention at stage {pos} sees {channels} channels, "
                               f"not divisible by num_heads={self.num_heads}")
                from .attention import MAX_POSITIONS
                if side * side > MAX_POSITIONS:
                    out.append(f"attention at stage {pos} spans L={side * side} positions, "
                               f"beyond the cap {MAX_POSITIONS}")
        return out

    def validate(self) -> "ModelConfig":
        problems = self.problems()
        if problems:
            raise ValueError("invalid model config:\n  " + "\n  ".join(problems))
        return self

    def to_dict(self) -> dict:
        return {
            "variant": self.variant, "latent_dim": self.latent_dim,
            "base_width": self.base_width, "img_channels": self.img_channels,
            "img_size": self.img_size, "num_heads": self.num_heads,
            "dropout": self.dropout, "seed": self.seed, "dtype": self.dtype,
            "use_position": self.use_position, "cmhsa_position": self.cmhsa_position,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class _GenStage:
    """One upsampling stage: either a plain deconv or a USE block."""
    deconv: Optional[ConvParams]
    use: Optional[UseBlock]
    bn: Optional[BatchNorm2d]
    activation: str  # "relu" | "tanh"


class Generator:
    """Maps latents [N, z] to images [N, C, S, S] inside (-1, 1)."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        cfg.validate()
        self.cfg = cfg
        dt = cfg.np_dtype()
        c0 = cfg.stem_channels
        self.stem = init_deconv_params(rng.derive("stem"), cfg.latent_dim, c0, 4,
                                       stride=1, padding=0, dtype=dt)
        self.stem_bn = BatchNorm2d(c0, dtype=dt, rng=rng.derive("stem_bn"))

        use_pos = cfg.resolved_use_position() if cfg.has_use else -1
        self.attn_after = cfg.resolved_cmhsa_position() if cfg.has_attention else -1
        self.stages: list[_GenStage] = []
        for i in range(cfg.stages):
            c_in = c0 >> i
            last = i == cfg.stages - 1
            c_out = cfg.img_channels if last else c0 >> (i + 1)
            srng = rng.derive("stage", i)
            if i == use_pos:
                stage = _GenStage(
                    deconv=None,
                    use=build_use_block(c_in, c_out, srng.derive("use"), dtype=dt),
                    bn=None if last else BatchNorm2d(c_out, dtype=dt, rng=srng.derive("bn")),
                    activation="tanh" if last else "relu",
                )
            else:
                stage = _GenStage(
                    deconv=init_deconv_params(srng.derive("deconv"), c_in, c_out, 4,
                                              stride=2, padding=1, dtype=dt),
                    use=None,
                    bn=None if last else BatchNorm2d(c_out, dtype=dt, rng=srng.derive("bn")),
                    activation="tanh" if last else "relu",
                )
            self.stages.append(stage)

        if cfg.has_attention:
            attn_channels = c0 >> (self.attn_after + 1)
            self.attn_cfg = AttentionConfig(in_channels=attn_channels,
                                            num_heads=cfg.num_heads, dropout=cfg.dropout)
            self.attn_proj: Optional[QKVProjection] = build_qkv_projection(
                self.attn_cfg, rng.derive("attn"), dtype=dt)
        else:
            self.attn_cfg = None
            self.attn_proj = None

    def forward(self, z, rng: Optional[Rng] = None, training: bool = False) -> Tensor:
        if not isinstance(z, Tensor):
            z = Tensor(np.asarray(z, dtype=self.cfg.np_dtype()))
        if z.ndim != 2 or z.shape[1] != self.cfg.latent_dim:
            raise ShapeError(f"latent batch must be [N, {self.cfg.latent_dim}], "
                             f"got shape {z.shape}")
        n = z.shape[0]
        x = z.reshape(n, self.cfg.latent_dim, 1, 1)
        x = relu(self.stem_bn(deconv2d(x, self.stem), training=training))
        for i, stage in enumerate(self.stages):
            if stage.use is not None:
                x = use_forward(x, stage.use)
            else:
                x = deconv2d(x, stage.deconv)
            if stage.bn is not None:
                x = stage.bn(x, training=training)
            x = relu(x) if stage.activation == "relu" else tanh(x)
            if i == self.attn_after and self.attn_proj is not None:
                attn_rng = rng.derive("attn_dropout") if rng is not None else None
                x = cmhsa_forward(x, self.attn_proj, self.attn_cfg,
                                  rng=attn_rng, training=training)
        return x

    __call__ = forward

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("stem.weight", self.stem.weight), ("stem.bias", self.stem.bias),
               ("stem.bn.gamma", self.stem_bn.gamma), ("stem.bn.beta", self.stem_bn.beta)]
        for i, stage in enumerate(self.stages):
            prefix = f"stage{i}"
            if stage.use is not None:
                out.extend((f"{prefix}.use.{n}", t) for n, t in stage.use.parameters())
            else:
                out.append((f"{prefix}.deconv.weight", stage.deconv.weight))
                out.append((f"{prefix}.deconv.bias", stage.deconv.bias))
            if stage.bn is not None:
                out.extend((f"{prefix}.bn.{n}", t) for n, t in stage.bn.parameters())
        if self.attn_proj is not None:
            out.extend((f"attn.{n}", t) for n, t in self.attn_proj.parameters())
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"stem.bn.{n}", b) for n, b in self.stem_bn.buffers()]
        for i, stage in enumerate(self.stages):
            if stage.bn is not None:
                out.extend((f"stage{i}.bn.{n}", b) for n, b in stage.bn.buffers())
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def use_block_count(self) -> int:
        return sum(1 for s in self.stages if s.use is not None)

    def attention_block_count(self) -> int:
        return 0 if self.attn_proj is None else 1


class Discriminator:
    """Maps images [N, C, S, S] to per-sample real probabilities in (0, 1).

    The tower is identical for every variant: strided convs with leaky ReLU,
    batch norm on all but the first block, and a single sigmoid head.
    """

    LEAK = 0.2

    def __init__(self, cfg: ModelConfig, rng: Rng):
        cfg.validate()
        self.cfg = cfg
        dt = cfg.np_dtype()
        self.blocks: list[tuple[ConvParams, Optional[BatchNorm2d]]] = []
        for i in range(cfg.stages):
            c_in = cfg.img_channels if i == 0 else cfg.base_width << (i - 1)
            c_out = cfg.base_width << i
            brng = rng.derive("block", i)
            conv = init_conv_params(brng.derive("conv"), c_in, c_out, 4,
                                    stride=2, padding=1, dtype=dt)
            bn = None if i == 0 else BatchNorm2d(c_out, dtype=dt, rng=brng.derive("bn"))
            self.blocks.append((conv, bn))
        head_in = cfg.base_width << (cfg.stages - 1)
        self.head = init_conv_params(rng.derive("head"), head_in, 1, 4,
                                     stride=1, padding=0, dtype=dt)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.cfg.np_dtype()))
        expected = (self.cfg.img_channels, self.cfg.img_size, self.cfg.img_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"image batch must be [N, {expected[0]}, {expected[1]}, "
                             f"{expected[2]}], got shape {x.shape}")
        for conv, bn in self.blocks:
            x = conv2d(x, conv)
            if bn is not None:
                x = bn(x, training=training)
            x = leaky_relu(x, self.LEAK)
        logits = conv2d(x, self.head).reshape(x.shape[0])
        return sigmoid(logits)

    __call__ = forward

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (conv, bn) in enumerate(self.blocks):
            out.append((f"block{i}.conv.weight", conv.weight))
            out.append((f"block{i}.conv.bias", conv.bias))
            if bn is not None:
                out.extend((f"block{i}.bn.{n}", t) for n, t in bn.parameters())
        out.append(("head.weight", self.head.weight))
        out.append(("head.bias", self.head.bias))
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (_, bn) in enumerate(self.blocks):
            if bn is not None:
                out.extend((f"block{i}.bn.{n}", b) for n, b in bn.buffers())
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]


def build_model(cfg: ModelConfig) -> tuple[Generator, Discriminator]:
    """Build the variant's generator/discriminator pair from cfg.seed."""
    cfg.validate()
    root = Rng(cfg.seed)
    generator = Generator(cfg, root.derive("generator"))
    discriminator = Discriminator(cfg, root.derive("discriminator"))
    return generator, discriminator
