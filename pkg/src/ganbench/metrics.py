"""Frechet-distance and Inception-Score evaluation over pluggable extractors.

The metric definitions are backbone-agnostic: anything exposing class
probabilities and a feature embedding can score a generator. Two extractors
ship here: :class:`ToyConvExtractor`, a small fixed-seed convolutional
classifier trained on the synthetic dataset's hair-color labels, and
:class:`ExternalActivations`, which replays activations precomputed elsewhere
(for example by a large pretrained network) from a binary activation file.
Reports record the extractor identity, so toy scores are never mistaken for
scores from a reference backbone.

Activation file layout (little-endian): magic ``GBACT001``, u32 version,
u64 row count, u32 dim, u16 digest length + utf-8 digest, then row-major
float32 data.
"""
from __future__ import annotations

import hashlib
import json
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, backward, leaky_relu, no_grad, softmax_rows
from .data import Dataset, ImageBatch, load_items
from .models import Generator
from .nn import conv2d, global_avg_pool, init_conv_params
from .rng import Rng

__all__ = [
    "MetricError", "FeatureExtractor", "ToyConvExtractor", "ExternalActivations",
    "GaussianStats", "MetricReport", "gaussian_stats", "frechet_distance",
    "inception_score", "evaluate", "real_vs_real_fid",
    "write_activations", "read_activations",
]

ACT_MAGIC = b"GBACT001"
ACT_VERSION = 1


class MetricError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# extractor interface
# ---------------------------------------------------------------------------

class FeatureExtractor(ABC):
    """Classifier-plus-embedding evaluator for metric computation."""

    name: str
    n_classes: int
    feature_dim: int

    @abstractmethod
    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        """[N,3,S,S] in [-1,1] -> class distribution rows [N, n_classes]."""

    @abstractmethod
    def features(self, images: np.ndarray) -> np.ndarray:
        """[N,3,S,S] in [-1,1] -> embedding rows [N, feature_dim]."""

    @abstractmethod
    def digest(self) -> str:
        """Stable identity of the extractor's weights and architecture."""


class ToyConvExtractor(FeatureExtractor):
    """Small strided-conv classifier; features are its pooled activations.

    Width doubles per stride-2 block (capped at 64), ending in global average
    pooling and a 1x1 classification head. Training is fully determined by
    (dataset, seed), so the digest pins the metric's identity.
    """

    name = "toy"
    TRAIN_SEED = 20240

    def __init__(self, img_size: int, n_classes: int, seed: int = TRAIN_SEED):
        if img_size < 16 or (img_size & (img_size - 1)) != 0:
            raise MetricError(f"img_size must be a power of two >= 16, got {img_size}")
        self.img_size = img_size
        self.n_classes = n_classes
        self.seed = seed
        rng = Rng(seed).derive("toy_extractor")
        self.convs = []
        c_in, side = 3, img_size
        i = 0
        while side > 4:
            c_out = min(16 << i, 64)
            self.convs.append(init_conv_params(rng.derive("conv", i), c_in, c_out, 4,
                                               stride=2, padding=1, dtype=np.float32))
            c_in, side, i = c_out, side // 2, i + 1
        self.feature_dim = c_in
        self.head = init_conv_params(rng.derive("head"), c_in, n_classes, 1,
                                     dtype=np.float32)
        self.trained_steps = 0

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, conv in enumerate(self.convs):
            out.append((f"conv{i}.weight", conv.weight))
            out.append((f"conv{i}.bias", conv.bias))
        out.append(("head.weight", self.head.weight))
        out.append(("head.bias", self.head.bias))
        return out

    def _trunk(self, images: Tensor) -> Tensor:
        x = images
        for conv in self.convs:
            x = leaky_relu(conv2d(x, conv), 0.2)
        return global_avg_pool(x)  # [N, D, 1, 1]

    def _logits(self, pooled: Tensor) -> Tensor:
        n = pooled.shape[0]
        return conv2d(pooled, self.head).reshape(n, self.n_classes)

    def fit(self, dataset: Dataset, steps: int = 300, batch_size: int = 64,
            lr: float = 1e-3) -> "ToyConvExtractor":
        """Cross-entropy training on the dataset's train split."""
        from .training import Adam  # deferred: training imports data, not metrics

        ids = dataset.split_ids("train")
        if len(ids) < batch_size:
            batch_size = max(1, len(ids))
        opt = Adam(self.named_parameters(), lr=lr, beta1=0.9, beta2=0.999)
        root = Rng(self.seed).derive("toy_fit")
        per_epoch = max(1, len(ids) // batch_size)
        for step in range(steps):
            epoch, idx = divmod(step, per_epoch)
            if idx == 0:
                perm = root.derive("order", epoch).permutation(len(ids))
                order = [ids[i] for i in perm]
            chunk = order[idx * batch_size:(idx + 1) * batch_size]
            images = Tensor(load_items(dataset, chunk, self.img_size))
            labels = dataset.labels(chunk)
            onehot = np.zeros((len(chunk), self.n_classes), dtype=np.float32)
            onehot[np.arange(len(chunk)), labels] = 1.0

            opt.zero_grad()
            probs = softmax_rows(self._logits(self._trunk(images)))
            nll = -((Tensor(onehot) * probs.clip(1e-12, 1.0).log()).sum(axis=1).mean())
            backward(nll)
            opt.step()
        self.trained_steps += steps
        return self

    def _batched(self, images: np.ndarray, want_probs: bool) -> np.ndarray:
        if images.ndim != 4 or images.shape[1:] != (3, self.img_size, self.img_size):
            raise MetricError(f"extractor expects [N,3,{self.img_size},{self.img_size}], "
                              f"got {images.shape}")
        chunks = []
        with no_grad():
            for start in range(0, images.shape[0], 256):
                x = Tensor(np.asarray(images[start:start + 256], dtype=np.float32))
                pooled = self._trunk(x)
                if want_probs:
                    chunks.append(softmax_rows(self._logits(pooled)).data)
                else:
                    chunks.append(pooled.data.reshape(x.shape[0], self.feature_dim))
        return np.concatenate(chunks, axis=0)

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        return self._batched(images, want_probs=True)

    def features(self, images: np.ndarray) -> np.ndarray:
        return self._batched(images, want_probs=False)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"toy:{self.img_size}:{self.n_classes}:{self.trained_steps}".encode())
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()


def write_activations(path: Path | str, matrix: np.ndarray, digest: str) -> None:
    """Persist an activation matrix [N, D] as float32 rows."""
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise MetricError(f"activation matrix must be 2-d, got shape {matrix.shape}")
    d = digest.encode()
    with open(path, "wb") as fh:
        fh.write(ACT_MAGIC)
        fh.write(struct.pack("<I", ACT_VERSION))
        fh.write(struct.pack("<Q", m.shape[0]))
        fh.write(struct.pack("<I", m.shape[1]))
        fh.write(struct.pack("<H", len(d)))
        fh.write(d)
        fh.write(m.tobytes())


def read_activations(path: Path | str) -> tuple[np.ndarray, str]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise MetricError(f"truncated activation file: {path}")
        out = raw[pos:pos + n]
        pos += n
        return out

    if take(8) != ACT_MAGIC:
        raise MetricError(f"not an activation file (bad magic): {path}")
    version = struct.unpack("<I", take(4))[0]
    if version != ACT_VERSION:
        raise MetricError(f"unsupported activation file version {version}: {path}")
    count = struct.unpack("<Q", take(8))[0]
    dim = struct.unpack("<I", take(4))[0]
    digest = take(struct.unpack("<H", take(2))[0]).decode()
    data = np.frombuffer(take(4 * count * dim), dtype="<f4").reshape(count, dim)
    if pos != len(raw):
        raise MetricError(f"trailing bytes in activation file: {path}")
    return data.astype(np.float32), digest


class ExternalActivations(FeatureExtractor):
    """Replays precomputed activations in request order.

    Intended for activations computed offline by a reference backbone for
    exactly the sample sequence an evaluation will request. Each call to
    ``features``/``predict_proba`` consumes the next ``len(images)`` rows of
    the corresponding file; :meth:`reset` rewinds both cursors.
    """

    name = "external"

    def __init__(self, features_path: Path | str,
                 probs_path: Optional[Path | str] = None):
        self._features, feat_digest = read_activations(features_path)
        self.feature_dim = self._features.shape[1]
        self._digest = feat_digest
        if probs_path is not None:
            self._probs, _ = read_activations(probs_path)
            rows = self._probs
            if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-4):
                raise MetricError(f"probability rows in {probs_path} are not distributions")
            self.n_classes = self._probs.shape[1]
        else:
            self._probs = None
            self.n_classes = 0
        self.reset()

    def reset(self) -> None:
        self._feat_cursor = 0
        self._prob_cursor = 0

    def _consume(self, matrix: Optional[np.ndarray], cursor: int, n: int,
                 kind: str) -> tuple[np.ndarray, int]:
        if matrix is None:
            raise MetricError(f"no {kind} file was provided to this extractor")
        if cursor + n > matrix.shape[0]:
            raise MetricError(
                f"{kind} file exhausted: {matrix.shape[0]} rows, "
                f"{cursor} consumed, {n} more requested")
        return matrix[cursor:cursor + n].copy(), cursor + n

    def features(self, images: np.ndarray) -> np.ndarray:
        out, self._feat_cursor = self._consume(self._features, self._feat_cursor,
                                               images.shape[0], "features")
        return out

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        out, self._prob_cursor = self._consume(self._probs, self._prob_cursor,
                                               images.shape[0], "probabilities")
        return out

    def digest(self) -> str:
        return self._digest


# ---------------------------------------------------------------------------
# metric math
# ---------------------------------------------------------------------------

@dataclass
class GaussianStats:
    """First two moments of a feature cloud; sigma is kept symmetric."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.shape != (self.mu.size, self.mu.size):
            raise MetricError(f"covariance shape {sigma.shape} does not match "
                              f"mean dimension {self.mu.size}")
        if np.abs(sigma - sigma.T).max() > 1e-8:
            raise MetricError("covariance is not symmetric within tolerance")
        self.sigma = (sigma + sigma.T) / 2.0


def gaussian_stats(features: np.ndarray) -> GaussianStats:
    """Sample mean and unbiased (N-1) covariance of feature rows."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise MetricError(f"need a [N>=2, D] feature matrix, got shape {x.shape}")
    mu = x.mean(axis=0)
    centered = x - mu
    sigma = centered.T @ centered / (x.shape[0] - 1)
    return GaussianStats(mu=mu, sigma=(sigma + sigma.T) / 2.0)


def _sqrt_psd(sym: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, clamping noise."""
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2).

    Evaluated in the symmetric form so only eigendecompositions of symmetric
    matrices are needed; eigenvalue noise is clamped at zero and a tiny
    negative total (>= -1e-8) is reported as 0.
    """
    if a.mu.shape != b.mu.shape:
        raise MetricError(f"dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    diff = a.mu - b.mu
    root_a = _sqrt_psd(a.sigma)
    inner = root_a @ b.sigma @ root_a
    inner = (inner + inner.T) / 2.0
    vals = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma)
                  - 2.0 * np.sqrt(vals).sum())
    if value < -1e-8:
        raise ArithmeticError(f"frechet distance evaluated to {value}; "
                              "inputs are not valid covariance pairs")
    return max(value, 0.0)


def inception_score(probs: np.ndarray, splits: int = 10) -> tuple[float, float, list[float]]:
    """exp(mean KL(p(y|x) || p(y))) per split; returns (mean, std, per-split).

    Rows must be probability distributions. N need not divide ``splits``;
    the last split absorbs the remainder.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise MetricError(f"probability matrix must be 2-d, got shape {p.shape}")
    if splits < 1:
        raise MetricError(f"splits must be >= 1, got {splits}")
    n = p.shape[0]
    if n < splits:
        raise MetricError(f"need at least one row per split: N={n}, splits={splits}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise MetricError("rows must be probability distributions (sum to 1, >= 0)")
    base = n // splits
    scores = []
    for s in range(splits):
        lo = s * base
        hi = (s + 1) * base if s < splits - 1 else n
        block = p[lo:hi]
        marginal = block.mean(axis=0)
        ratio = np.zeros_like(block)
        positive = block > 0
        ratio[positive] = block[positive] * (np.log(block[positive])
                                             - np.log(marginal[np.nonzero(positive)[1]]))
        scores.append(float(np.exp(ratio.sum(axis=1).mean())))
    return float(np.mean(scores)), float(np.std(scores)), scores


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    fid: float
    is_mean: float
    is_std: float
    is_per_split: list[float]
    n_real: int
    n_fake: int
    splits: int
    extractor_name: str
    extractor_digest: str
    seed: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "fid": self.fid, "is_mean": self.is_mean, "is_std": self.is_std,
            "is_per_split": self.is_per_split, "n_real": self.n_real,
            "n_fake": self.n_fake, "splits": self.splits,
            "extractor_name": self.extractor_name,
            "extractor_digest": self.extractor_digest, "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def format_text(self) -> str:
        return (f"FID          {self.fid:.6f}\n"
                f"IS           {self.is_mean:.6f} +/- {self.is_std:.6f}\n"
                f"samples      {self.n_fake} fake vs {self.n_real} real "
                f"({self.splits} splits)\n"
                f"extractor    {self.extractor_name} [{self.extractor_digest[:12]}]")


def _as_image_array(real_images) -> np.ndarray:
    if isinstance(real_images, ImageBatch):
        real_images = real_images.data
    if isinstance(real_images, Tensor):
        real_images = real_images.data
    return np.asarray(real_images, dtype=np.float32)


def sample_images(generator: Generator, n: int, seed: int,
                  batch_size: int = 64) -> np.ndarray:
    """Deterministically sample n eval-mode images as [n,C,S,S] float32."""
    rng = Rng(seed).derive("eval_latents")
    cfg = generator.cfg
    out = []
    remaining = n
    with no_grad():
        while remaining > 0:
            m = min(batch_size, remaining)
            z = rng.normal((m, cfg.latent_dim), dtype=cfg.np_dtype())
            out.append(generator.forward(Tensor(z), training=False).data)
            remaining -= m
    return np.concatenate(out, axis=0).astype(np.float32)


def evaluate(generator: Generator, real_images, extractor: FeatureExtractor,
             n_samples: int, seed: int, splits: int = 10,
             batch_size: int = 64) -> MetricReport:
    """Sample fakes from seed, extract features/probabilities, report FID/IS."""
    if n_samples < 64:
        raise MetricError(f"n_samples must be >= 64, got {n_samples}")
    reals = _as_image_array(real_images)
    fakes = sample_images(generator, n_samples, seed, batch_size)
    if reals.shape[1:] != fakes.shape[1:]:
        raise MetricError(f"real images {reals.shape} and generated images "
                          f"{fakes.shape} disagree in shape")
    feats_real = extractor.features(reals)
    feats_fake = extractor.features(fakes)
    fid = frechet_distance(gaussian_stats(feats_real), gaussian_stats(feats_fake))
    is_mean, is_std, per_split = inception_score(extractor.predict_proba(fakes), splits)
    return MetricReport(fid=fid, is_mean=is_mean, is_std=is_std,
                        is_per_split=per_split, n_real=int(reals.shape[0]),
                        n_fake=n_samples, splits=splits,
                        extractor_name=extractor.name,
                        extractor_digest=extractor.digest(), seed=seed)


def real_vs_real_fid(real_images, extractor: FeatureExtractor) -> float:
    """FID between the first and second halves of a real set (noise floor)."""
    reals = _as_image_array(real_images)
    n = reals.shape[0]
    if n < 4:
        raise MetricError(f"need at least 4 images to split in halves, got {n}")
    half = n // 2
    fa = extractor.features(reals[:half])
    fb = extractor.features(reals[half:2 * half])
    return frechet_distance(gaussian_stats(fa), gaussian_stats(fb))
