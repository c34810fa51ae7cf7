"""Mixup and the dataset-expansion transforms (rotate, cutout, tile shuffle)."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import Dataset, from_u8, load_idx, to_u8, write_idx

TRANSFORMS = ("original", "rotate", "cutout", "shuffle2", "shuffle3", "shuffle4")
CUTOUT_RANGE = (0.2, 0.5)


@dataclass
class MixupSample:
    x: np.ndarray
    y: np.ndarray
    lam: float


def one_hot(labels, class_count, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), class_count), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def mixup(xa, ya, xb, yb, a: float = 1.0, rng=None, lam: float | None = None) -> MixupSample:
    """x = lam*xa + (1-lam)*xb and likewise for labels, one lam ~ Beta(a, a) per batch."""
    if not a > 0:
        raise ValueError(f"mixup Beta parameter must be positive, got {a}")
    xa, xb = np.asarray(xa), np.asarray(xb)
    ya, yb = np.asarray(ya), np.asarray(yb)
    if xa.shape != xb.shape or ya.shape != yb.shape:
        raise ValueError(f"mixup batches differ: {xa.shape}/{xb.shape}, labels {ya.shape}/{yb.shape}")
    if lam is None:
        rng = rng if rng is not None else np.random.default_rng()
        lam = float(rng.beta(a, a))
    if not 0 <= lam <= 1:
        raise ValueError(f"mixup lambda must be in [0, 1], got {lam}")
    dt = xa.dtype
    x = (dt.type(lam) * xa + dt.type(1 - lam) * xb).astype(dt)
    y = (lam * ya + (1 - lam) * yb).astype(ya.dtype)
    return MixupSample(x, y, lam)


def rotate(image: np.ndarray, degrees: float, fill: float = 0.0, order: int = 1) -> np.ndarray:
    """Rotate about the centre over the last two axes; uncovered pixels take ``fill``."""
    if image.shape[-1] != image.shape[-2]:
        raise ValueError(f"rotate expects square images, got {image.shape}")
    out = ndimage.rotate(image, degrees, axes=(-1, -2), reshape=False, order=order,
                         mode="constant", cval=fill, prefilter=False)
    return out.astype(image.dtype)


def cutout(image: np.ndarray, rng, fill: float = 0.0, factor: float | None = None) -> np.ndarray:
    """Fill one square of side floor(factor*side), factor ~ U[0.2, 0.5], centred uniformly and clipped."""
    h, w = image.shape[-2:]
    side = min(h, w)
    if side < 5:
        raise ValueError(f"cutout needs an image side >= 5, got {side}")
    if factor is None:
        factor = rng.uniform(*CUTOUT_RANGE)
    s = int(np.floor(factor * side))
    cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
    top, left = cy - s // 2, cx - s // 2
    out = image.copy()
    out[..., max(top, 0):max(top + s, 0), max(left, 0):max(left + s, 0)] = fill
    return out


def tile_edges(side: int, n: int) -> list[int]:
    """Tile boundaries; the last tile absorbs the remainder."""
    base = side // n
    return [i * base for i in range(n)] + [side]


def _resize_nearest(tile, h, w):
    th, tw = tile.shape[-2:]
    if (th, tw) == (h, w):
        return tile
    rows = (np.arange(h) * th) // h
    cols = (np.arange(w) * tw) // w
    return tile[..., rows[:, None], cols[None, :]]


def shuffle(image: np.ndarray, n: int, rng=None, permutation=None) -> np.ndarray:
    """Cut the image into n x n tiles and reassemble them in permuted order.

    Destination tile ``i`` receives source tile ``permutation[i]``, resampled by
    nearest neighbour when the two tiles differ in size.
    """
    if n not in (2, 3, 4):
        raise ValueError(f"shuffle grid must be 2, 3 or 4, got {n}")
    h, w = image.shape[-2:]
    if min(h, w) < n:
        raise ValueError(f"image side {min(h, w)} smaller than grid {n}")
    if permutation is None:
        permutation = rng.permutation(n * n)
    permutation = np.asarray(permutation)
    if sorted(permutation.tolist()) != list(range(n * n)):
        raise ValueError("shuffle permutation must cover every tile exactly once")
    ye, xe = tile_edges(h, n), tile_edges(w, n)
    boxes = [(ye[r], ye[r + 1], xe[c], xe[c + 1]) for r in range(n) for c in range(n)]
    out = np.empty_like(image)
    for dst, src in enumerate(permutation):
        y0, y1, x0, x1 = boxes[dst]
        sy0, sy1, sx0, sx1 = boxes[src]
        out[..., y0:y1, x0:x1] = _resize_nearest(image[..., sy0:sy1, sx0:sx1], y1 - y0, x1 - x0)
    return out


def hflip(images: np.ndarray, rng) -> np.ndarray:
    """Flip each image left-right with probability 1/2."""
    mask = rng.random(len(images)) < 0.5
    out = images.copy()
    out[mask] = out[mask][..., ::-1]
    return out


def transform_record(image, kind: str, rng, fill: float) -> np.ndarray:
    if kind == "original":
        return image
    if kind == "rotate":
        return rotate(image, rng.uniform(0.0, 360.0), fill)
    if kind == "cutout":
        return cutout(image, rng, fill)
    if kind.startswith("shuffle"):
        return shuffle(image, int(kind[-1]), rng)
    raise ValueError(f"unknown transform {kind!r}")


def expand_dataset(dataset: Dataset, seed: int = 0) -> Dataset:
    """Original records followed by one rotate, cutout and 2/3/4-grid shuffle copy of each.

    Every copy draws from its own generator seeded by (seed, record, transform),
    and transformed pixels are snapped to the 8-bit grid so the result survives
    an IDX round trip bitwise.
    """
    if len(dataset) == 0:
        raise ValueError("cannot expand an empty dataset")
    fill = dataset.mean_pixel()
    n = len(dataset)
    images = np.empty((len(TRANSFORMS) * n,) + dataset.image_shape, dtype=np.float32)
    provenance = []
    for t, kind in enumerate(TRANSFORMS):
        for i in range(n):
            rng = np.random.default_rng([seed, i, t])
            img = transform_record(dataset.images[i], kind, rng, fill)
            images[t * n + i] = img if kind == "original" else from_u8(to_u8(img))
            provenance.append([i, kind])
    labels = np.tile(dataset.labels, len(TRANSFORMS))
    meta = dict(dataset.meta, expanded_from=dataset.digest(), expand_seed=seed)
    meta.pop("positions", None)
    return Dataset(images, labels, dataset.class_count, dataset.split, provenance, meta)


def expansion_digest(expanded: Dataset) -> str:
    h = hashlib.sha256(expanded.digest().encode())
    h.update(json.dumps(expanded.provenance).encode())
    return h.hexdigest()


def write_expanded(expanded: Dataset, directory) -> dict:
    """IDX images/labels plus a JSON sidecar with provenance and digests."""
    os.makedirs(directory, exist_ok=True)
    write_idx(expanded, os.path.join(directory, "images.idx"), os.path.join(directory, "labels.idx"))
    manifest = {"count": len(expanded), "class_count": expanded.class_count, "split": expanded.split,
                "digest": expansion_digest(expanded), "meta": expanded.meta, "provenance": expanded.provenance}
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_expanded(directory) -> Dataset:
    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    ds = load_idx(os.path.join(directory, "images.idx"), os.path.join(directory, "labels.idx"),
                  class_count=manifest["class_count"], split=manifest["split"])
    ds.provenance = [list(p) for p in manifest["provenance"]]
    ds.meta = manifest["meta"]
    if expansion_digest(ds) != manifest["digest"]:
        raise ValueError(f"{directory}: expanded dataset digest mismatch")
    return ds
