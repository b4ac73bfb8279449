"""Dataset ingestion, deterministic 80:10:10 splitting, preprocessing, and a
procedural face generator for desk-scale end-to-end runs.

The synthetic faces are simple layered shapes (background, hair ellipse, face
ellipse, two eyes) rendered straight from per-image parameter records, so a
record renders to bit-identical pixels every time. The class label is the
hair-color bucket, which gives the toy feature extractor something learnable.

Manifest format (line-oriented text): ``id<TAB>relative-path<TAB>label<TAB>split``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .autodiff import Tensor
from .rng import Rng

__all__ = [
    "DataError", "SyntheticFaceSpec", "DatasetItem", "Dataset", "ImageBatch",
    "HAIR_PALETTE", "sample_face_spec", "render_face", "generate_synthetic_dataset",
    "split_counts", "split_dataset", "load_manifest", "load_and_preprocess",
    "bilinear_resize", "load_items", "batch_iter", "save_image_grid",
]


class DataError(RuntimeError):
    pass


# Hair-color buckets; index == class label. Jitter stays well inside bucket
# separation so classes remain distinguishable.
HAIR_PALETTE: tuple[tuple[int, int, int], ...] = (
    (24, 20, 26),     # black
    (116, 72, 42),    # brown
    (226, 202, 112),  # blond
    (182, 62, 40),    # red
    (72, 110, 202),   # blue
    (84, 172, 94),    # green
    (152, 92, 190),   # purple
    (236, 132, 182),  # pink
)

_SKIN_TONES = ((246, 222, 192), (232, 202, 172), (212, 174, 142))


@dataclass(frozen=True)
class SyntheticFaceSpec:
    """Everything needed to render one face; rendering is pure in this record."""

    label: int
    background: tuple[int, int, int]
    hair: tuple[int, int, int]
    skin: tuple[int, int, int]
    eye_color: tuple[int, int, int]
    face_center: tuple[float, float]   # (x, y) in unit coordinates
    face_axes: tuple[float, float]
    hair_scale: float
    eye_dx: float
    eye_dy: float
    eye_radius: float

    def eye_centers(self) -> tuple[tuple[float, float], tuple[float, float]]:
        cx, cy = self.face_center
        return ((cx - self.eye_dx, cy + self.eye_dy), (cx + self.eye_dx, cy + self.eye_dy))


def _jitter_color(rng: Rng, base: tuple[int, int, int], spread: int = 14) -> tuple[int, int, int]:
    noise = rng.integers(-spread, spread + 1, 3)
    return tuple(int(np.clip(base[i] + noise[i], 0, 255)) for i in range(3))


def sample_face_spec(rng: Rng, label: int, classes: int) -> SyntheticFaceSpec:
    if not 0 <= label < classes <= len(HAIR_PALETTE):
        raise DataError(f"label {label} outside the {classes}-class palette "
                        f"(max {len(HAIR_PALETTE)})")
    background = tuple(int(v) for v in rng.integers(168, 240, 3))
    hair = _jitter_color(rng.derive("hair"), HAIR_PALETTE[label])
    skin = _jitter_color(rng.derive("skin"),
                         _SKIN_TONES[int(rng.integers(0, len(_SKIN_TONES)))], spread=8)
    eye_color = tuple(int(v) for v in rng.integers(16, 78, 3))
    u = rng.derive("geom")
    face_center = (0.5 + float(u.uniform((), -0.04, 0.04)),
                   0.56 + float(u.uniform((), -0.03, 0.03)))
    face_axes = (float(u.uniform((), 0.28, 0.34)), float(u.uniform((), 0.30, 0.38)))
    # Eye offsets stay conservatively inside the ellipse for any sampled axes.
    return SyntheticFaceSpec(
        label=label, background=background, hair=hair, skin=skin, eye_color=eye_color,
        face_center=face_center, face_axes=face_axes,
        hair_scale=float(u.uniform((), 1.22, 1.42)),
        eye_dx=float(u.uniform((), 0.10, 0.15)),
        eye_dy=float(u.uniform((), -0.14, -0.06)),
        eye_radius=float(u.uniform((), 0.040, 0.058)),
    )


def render_face(spec: SyntheticFaceSpec, size: int = 64) -> np.ndarray:
    """Rasterize to uint8 [size, size, 3]."""
    ys, xs = np.mgrid[0:size, 0:size]
    ux = (xs + 0.5) / size
    uy = (ys + 0.5) / size
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = spec.background

    cx, cy = spec.face_center
    ax, ay = spec.face_axes
    hair_cy = cy - 0.05
    hair = (((ux - cx) / (ax * spec.hair_scale)) ** 2
            + ((uy - hair_cy) / (ay * spec.hair_scale)) ** 2) <= 1.0
    img[hair] = spec.hair

    face = (((ux - cx) / ax) ** 2 + ((uy - cy) / ay) ** 2) <= 1.0
    img[face] = spec.skin

    for ex, ey in spec.eye_centers():
        eye = ((ux - ex) ** 2 + (uy - ey) ** 2) <= spec.eye_radius ** 2
        img[eye] = spec.eye_color
    return img


@dataclass(frozen=True)
class DatasetItem:
    id: str
    path: str
    label: int
    split: str


@dataclass
class Dataset:
    root: Path
    items: list[DatasetItem]
    digest: str
    _by_id: dict[str, DatasetItem] = field(default_factory=dict, repr=False)
    _cache: dict[tuple[str, int], np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {item.id: item for item in self.items}
        if len(self._by_id) != len(self.items):
            raise DataError("duplicate item ids in manifest")

    def split_ids(self, split: str) -> list[str]:
        if split == "all":
            return [item.id for item in self.items]
        return [item.id for item in self.items if item.split == split]

    def item(self, item_id: str) -> DatasetItem:
        try:
            return self._by_id[item_id]
        except KeyError:
            raise DataError(f"unknown item id {item_id!r}") from None

    def labels(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self.item(i).label for i in ids], dtype=np.int64)


@dataclass
class ImageBatch:
    """[N,3,S,S] images in [-1,1] plus their item ids (empty for generated)."""

    data: Tensor
    ids: list[str]

    def __post_init__(self):
        d = self.data.data
        if d.ndim != 4 or d.shape[1] != 3:
            raise DataError(f"image batch must be [N,3,S,S], got shape {d.shape}")
        if d.size and (d.min() < -1.0 or d.max() > 1.0):
            raise DataError("image batch values must lie in [-1, 1]")


def split_counts(n: int) -> tuple[int, int, int]:
    """floor(0.8N) train, floor(0.1N) validation, remainder test."""
    train = int(np.floor(0.8 * n))
    val = int(np.floor(0.1 * n))
    return train, val, n - train - val


def split_dataset(entries: Sequence[tuple[str, str, int]], seed: int,
                  root: Path | str = ".") -> Dataset:
    """Assign 80:10:10 splits by a seed-deterministic shuffle.

    ``entries`` are (id, relative path, label) rows; the returned dataset
    keeps the original row order, only the split tags depend on the seed.
    """
    n = len(entries)
    if n < 10:
        raise DataError(f"dataset must contain at least 10 items, got {n}")
    n_train, n_val, _ = split_counts(n)
    perm = Rng(seed).derive("split").permutation(n)
    tags = [""] * n
    for rank, idx in enumerate(perm):
        if rank < n_train:
            tags[idx] = "train"
        elif rank < n_train + n_val:
            tags[idx] = "val"
        else:
            tags[idx] = "test"
    items = [DatasetItem(i, p, int(lbl), tags[k]) for k, (i, p, lbl) in enumerate(entries)]
    digest = _manifest_digest(items)
    return Dataset(root=Path(root), items=items, digest=digest)


def _manifest_lines(items: Sequence[DatasetItem]) -> str:
    return "".join(f"{it.id}\t{it.path}\t{it.label}\t{it.split}\n" for it in items)


def _manifest_digest(items: Sequence[DatasetItem]) -> str:
    return hashlib.sha256(_manifest_lines(items).encode()).hexdigest()


def write_manifest(ds: Dataset, path: Path | str) -> None:
    Path(path).write_text(_manifest_lines(ds.items))
    Path(str(path) + ".sha256").write_text(ds.digest + "\n")


def load_manifest(path: Path | str) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    items = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields")
        item_id, rel, label, split = parts
        if split not in ("train", "val", "test"):
            raise DataError(f"{path}:{lineno}: unknown split tag {split!r}")
        items.append(DatasetItem(item_id, rel, int(label), split))
    if not items:
        raise DataError(f"manifest is empty: {path}")
    return Dataset(root=path.parent, items=items, digest=_manifest_digest(items))


def generate_synthetic_dataset(out_dir: Path | str, n: int, seed: int,
                               size: int = 64, classes: int = 6) -> Dataset:
    """Render n labeled faces, write PNGs plus a split manifest, return the dataset.

    Labels are assigned round-robin, so classes stay balanced within one.
    """
    if n < 1:
        raise DataError(f"need n >= 1 images, got {n}")
    if not 1 <= classes <= len(HAIR_PALETTE):
        raise DataError(f"classes must lie in [1, {len(HAIR_PALETTE)}], got {classes}")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    root = Rng(seed)
    entries = []
    for i in range(n):
        label = i % classes
        spec = sample_face_spec(root.derive("img", i), label, classes)
        img = render_face(spec, size=size)
        name = f"img_{i:06d}"
        rel = f"images/{name}.png"
        Image.fromarray(img).save(out_dir / rel)
        entries.append((name, rel, label))
    ds = split_dataset(entries, seed, root=out_dir)
    write_manifest(ds, out_dir / "manifest.tsv")
    return ds


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resampling with edge clamping, float64."""
    h, w = img.shape[:2]
    src = img.astype(np.float64, copy=False)

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0.0, n_in - 1.0)
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    y0, y1, wy = coords(out_h, h)
    x0, x1, wx = coords(out_w, w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def _decode_rgb(path: Path) -> np.ndarray:
    """8-bit RGB pixels; grayscale is expanded, alpha dropped."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def _to_unit_range(img_u8: np.ndarray, target: int, dtype) -> np.ndarray:
    """uint8 HWC -> float CHW in [-1, 1] at the target side length."""
    resized = img_u8 if img_u8.shape[:2] == (target, target) else \
        bilinear_resize(img_u8, target, target)
    scaled = np.asarray(resized, dtype=np.float64) / 255.0 * 2.0 - 1.0
    return np.clip(scaled, -1.0, 1.0).transpose(2, 0, 1).astype(dtype)


def load_and_preprocess(paths: Sequence[Path | str], target: int = 64,
                        dtype=np.float32) -> ImageBatch:
    """Decode, bilinear-resize to target, and normalize into [-1, 1]."""
    arrays, ids = [], []
    for p in paths:
        p = Path(p)
        arrays.append(_to_unit_range(_decode_rgb(p), target, dtype))
        ids.append(p.stem)
    if not arrays:
        raise DataError("no images to load")
    return ImageBatch(data=Tensor(np.stack(arrays)), ids=ids)


def load_items(ds: Dataset, ids: Sequence[str], size: int,
               dtype=np.float32) -> np.ndarray:
    """Stack preprocessed images for the given ids, with per-dataset caching."""
    out = np.empty((len(ids), 3, size, size), dtype=dtype)
    for k, item_id in enumerate(ids):
        key = (item_id, size)
        cached = ds._cache.get(key)
        if cached is None:
            item = ds.item(item_id)
            cached = _to_unit_range(_decode_rgb(ds.root / item.path), size, np.float32)
            ds._cache[key] = cached
        out[k] = cached
    return out


def batch_iter(ds: Dataset, split: str, batch_size: int, seed: int, epoch: int = 0,
               train: bool = True, size: int = 64, dtype=np.float32) -> Iterator[ImageBatch]:
    """Deterministic batches for (seed, epoch).

    Training mode shuffles by (seed, epoch) and drops the final partial
    batch; evaluation mode keeps manifest order and the remainder.
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    ids = ds.split_ids(split)
    if not ids:
        raise DataError(f"split {split!r} is empty")
    if train:
        perm = Rng(seed).derive("epoch_order", epoch).permutation(len(ids))
        ids = [ids[i] for i in perm]
        end = (len(ids) // batch_size) * batch_size
        ids = ids[:end]
    for start in range(0, len(ids), batch_size):
        chunk = ids[start:start + batch_size]
        yield ImageBatch(data=Tensor(load_items(ds, chunk, size, dtype)), ids=list(chunk))


def save_image_grid(images: np.ndarray, path: Path | str) -> None:
    """Tile [N,3,S,S] images in [-1,1] into a ceil(sqrt(N))-column PNG grid."""
    if images.ndim != 4:
        raise DataError(f"grid input must be [N,C,S,S], got shape {images.shape}")
    n, c, s, _ = images.shape
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    u8 = ((np.clip(images, -1.0, 1.0) + 1.0) * 127.5).round().astype(np.uint8)
    if c == 1:
        u8 = np.repeat(u8, 3, axis=1)
    canvas = np.zeros((rows * s, cols * s, 3), dtype=np.uint8)
    for i in range(n):
        r, col = divmod(i, cols)
        canvas[r * s:(r + 1) * s, col * s:(col + 1) * s] = u8[i].transpose(1, 2, 0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(path)
