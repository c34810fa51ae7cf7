"""Datasets: IDX container I/O, a seeded synthetic generator, batching and proxy sampling."""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

logger = logging.getLogger(__name__)

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
SPLIT_CODES = {"train": 1, "test": 2, "val": 3}


class IdxFormatError(ValueError):
    pass


def from_u8(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def to_u8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


@dataclass
class Dataset:
    """Images ``[N, 1, H, W]`` float32 in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"
    provenance: list | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[:, None]
        if self.images.ndim != 4:
            raise ValueError(f"dataset images must be [N, C, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel mean/std (float64); only meaningful on the training split."""
        if len(self) == 0:
            return np.zeros(self.images.shape[1]), np.ones(self.images.shape[1])
        mean = self.images.mean(axis=(0, 2, 3), dtype=np.float64)
        std = self.images.std(axis=(0, 2, 3), dtype=np.float64)
        return mean, np.where(std > 0, std, 1.0)

    def mean_pixel(self) -> float:
        return float(self.images.mean(dtype=np.float64)) if len(self) else 0.0

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        prov = None if self.provenance is None else [self.provenance[i] for i in index]
        return replace(self, images=self.images[index], labels=self.labels[index], provenance=prov)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.images.shape, self.class_count)).encode())
        h.update(to_u8(self.images).tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()

    def manifest(self) -> dict:
        return {"split": self.split, "count": len(self), "image_shape": list(self.image_shape),
                "class_count": self.class_count, "digest": self.digest(), "meta": self.meta}


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return ((images - mean) / std).astype(np.float32)


# --------------------------------------------------------------------------
# IDX


def _read_header(buf: bytes, magic: int, path) -> tuple[list, int]:
    if len(buf) < 4:
        raise IdxFormatError(f"{path}: truncated header at byte offset {len(buf)}, need 4 magic bytes")
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{got:08x} at byte offset 0, expected 0x{magic:08x}")
    rank = magic & 0xFF
    end = 4 + 4 * rank
    if len(buf) < end:
        raise IdxFormatError(f"{path}: truncated dimensions at byte offset {len(buf)}, need {end} header bytes")
    dims = list(struct.unpack_from(f">{rank}I", buf, 4))
    return dims, end


def _payload(buf: bytes, dims, offset, path) -> np.ndarray:
    size = int(np.prod(dims, dtype=np.int64))
    if len(buf) < offset + size:
        raise IdxFormatError(f"{path}: truncated payload at byte offset {len(buf)}, expected {offset + size} bytes")
    if len(buf) > offset + size:
        raise IdxFormatError(f"{path}: {len(buf) - offset - size} trailing bytes after byte offset {offset + size}")
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=offset).reshape(dims)


def load_idx(images_path, labels_path, class_count: int | None = None, split: str = "train") -> Dataset:
    """Parse big-endian IDX u8 images (rank 3) and labels (rank 1)."""
    with open(images_path, "rb") as fh:
        ibuf = fh.read()
    with open(labels_path, "rb") as fh:
        lbuf = fh.read()
    idims, ioff = _read_header(ibuf, IDX_IMAGES, images_path)
    ldims, loff = _read_header(lbuf, IDX_LABELS, labels_path)
    if idims[0] != ldims[0]:
        raise IdxFormatError(f"count mismatch: {images_path} declares {idims[0]} images at byte offset 4, "
                             f"{labels_path} declares {ldims[0]} labels at byte offset 4")
    images = from_u8(_payload(ibuf, idims, ioff, images_path))
    labels = _payload(lbuf, ldims, loff, labels_path).astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images[:, None], labels, class_count, split)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    if dataset.images.shape[1] != 1:
        raise ValueError("IDX export supports single-channel images only")
    n, _, h, w = dataset.images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES, n, h, w))
        fh.write(to_u8(dataset.images[:, 0]).tobytes())
    if dataset.labels.size and dataset.labels.max() > 255:
        raise ValueError("IDX u8 labels cannot exceed 255")
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


# --------------------------------------------------------------------------
# synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    """Per-class stripe texture plus a class patch at a random location, over noise."""

    class_count: int = 10
    per_class: int = 60
    side: int = 32
    seed: int = 0
    split: str = "train"
    patch: int = 7
    texture_amp: float = 0.08
    patch_amp: float = 0.35
    noise: float = 0.08


def _textures(spec: SyntheticSpec, rng) -> np.ndarray:
    """Gabor-like stripes: five frequencies x two orientations, cycled over classes."""
    yy, xx = np.mgrid[0:spec.side, 0:spec.side].astype(np.float64)
    c = (spec.side - 1) / 2
    env = np.exp(-((yy - c) ** 2 + (xx - c) ** 2) / (2 * (spec.side / 2.5) ** 2))
    out = np.empty((spec.class_count, spec.side, spec.side))
    freqs = np.linspace(1.5, 5.5, 5) / spec.side
    for k in range(spec.class_count):
        f = freqs[k % 5]
        axis = yy if (k // 5) % 2 else xx
        # symmetric about the vertical axis so flips keep the class evidence
        if axis is xx:
            axis = np.abs(xx - c)
        out[k] = env * np.cos(2 * np.pi * f * axis + rng.uniform(0, 2 * np.pi))
    return out


def synthetic_templates(spec: SyntheticSpec) -> np.ndarray:
    """Class patches ``[class_count, p, p]`` with zero mean and unit max amplitude."""
    rng = np.random.default_rng([spec.seed, 0])
    p = spec.patch
    half = rng.choice([-1.0, 1.0], size=(spec.class_count, p, (p + 1) // 2))
    t = np.concatenate([half, half[:, :, : p // 2][:, :, ::-1]], axis=2)  # left-right symmetric
    t -= t.mean(axis=(1, 2), keepdims=True)
    return t / np.abs(t).max(axis=(1, 2), keepdims=True)


def make_synthetic(spec: SyntheticSpec) -> Dataset:
    if spec.split not in SPLIT_CODES:
        raise ValueError(f"unknown split {spec.split!r}")
    if spec.side < spec.patch:
        raise ValueError(f"image side {spec.side} smaller than patch {spec.patch}")
    templates = synthetic_templates(spec)
    textures = _textures(spec, np.random.default_rng([spec.seed, 0, 1]))
    rng = np.random.default_rng([spec.seed, SPLIT_CODES[spec.split]])
    n = spec.class_count * spec.per_class
    labels = np.repeat(np.arange(spec.class_count), spec.per_class)
    labels = labels[rng.permutation(n)]
    images = np.empty((n, spec.side, spec.side))
    positions = rng.integers(0, spec.side - spec.patch + 1, size=(n, 2))
    for i in range(n):
        k = labels[i]
        img = 0.5 + spec.texture_amp * rng.uniform(0.5, 1.5) * textures[k]
        img += spec.noise * rng.standard_normal((spec.side, spec.side))
        r, c = positions[i]
        img[r:r + spec.patch, c:c + spec.patch] += spec.patch_amp * templates[k]
        images[i] = img
    images = from_u8(to_u8(images))
    ds = Dataset(images[:, None], labels, spec.class_count, spec.split,
                 meta={"source": "synthetic", "spec": asdict(spec)})
    ds.meta["positions"] = positions.tolist()
    return ds


def template_match_predict(images: np.ndarray, templates: np.ndarray) -> np.ndarray:
    """Brute-force oracle: argmax over classes of the best patch correlation anywhere in the image."""
    from numpy.lib.stride_tricks import sliding_window_view

    x = images[:, 0] if images.ndim == 4 else images
    p = templates.shape[1]
    win = sliding_window_view(x - x.mean(axis=(1, 2), keepdims=True), (p, p), axis=(1, 2))
    scores = np.einsum("nijab,kab->nkij", win, templates, optimize=True)
    return scores.reshape(len(x), len(templates), -1).max(axis=2).argmax(axis=1)


# --------------------------------------------------------------------------
# sampling


def sample_proxy(dataset: Dataset, n: int = 256, seed: int = 0) -> np.ndarray:
    """Indices of a uniform sample without replacement; the whole set (with a warning) if n > size."""
    if len(dataset) == 0:
        raise ValueError("cannot sample a proxy set from an empty dataset")
    if n > len(dataset):
        logger.warning("proxy size %d exceeds dataset size %d; using the whole dataset", n, len(dataset))
        n = len(dataset)
    return np.random.default_rng(seed).choice(len(dataset), size=n, replace=False)


def iterate_batches(count: int, batch_size: int, rng=None, drop_singleton: bool = True):
    """Index batches over ``count`` records, shuffled when ``rng`` is given.

    A trailing batch of one record is dropped in training (batch statistics need two).
    """
    order = rng.permutation(count) if rng is not None else np.arange(count)
    for s in range(0, count, batch_size):
        idx = order[s:s + batch_size]
        if drop_singleton and len(idx) < 2 and count > 1:
            continue
        yield idx
