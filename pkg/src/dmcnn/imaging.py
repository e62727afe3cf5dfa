"""Luma image I/O, block padding and training-patch sampling.

An image plane is a plain 2-D ``float64`` array of shape ``(height, width)``
holding luma samples in ``[0, 255]``.
"""
from __future__ import annotations

import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigurationError, ImageDecodeError

log = logging.getLogger(__name__)

# full-range BT.601, the JFIF convention
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

BLOCK = 8


def round_half_away(x):
    """Round to nearest integer, ties away from zero (C ``round``)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def rgb_to_luma(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    wr, wg, wb = LUMA_WEIGHTS
    return wr * r + wg * g + wb * b


def load_luma(path) -> np.ndarray:
    """Read an image file and return its luma plane.

    RGB(A) images are converted with full-range BT.601 weights, grayscale
    images pass through unchanged. PNG and binary PGM are the supported
    formats; anything else Pillow can decode is accepted as a convenience.

    Raises
    ------
    ImageDecodeError
        If the file is missing, unreadable or not an image.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("L", "I", "F"):
                arr = np.asarray(im, dtype=np.float64)
            elif mode == "1":
                arr = np.asarray(im.convert("L"), dtype=np.float64)
            elif mode in ("LA", "La"):
                arr = np.asarray(im.getchannel(0), dtype=np.float64)
            else:
                arr = rgb_to_luma(np.asarray(im.convert("RGB")))
    except (FileNotFoundError, IsADirectoryError, PermissionError, UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode image {str(path)!r}: {exc}") from exc
    if arr.ndim != 2 or arr.size == 0:
        raise ImageDecodeError(f"cannot decode image {str(path)!r}: unexpected shape {arr.shape}")
    return np.clip(arr, 0.0, 255.0)


def to_uint8(plane) -> np.ndarray:
    return np.clip(round_half_away(plane), 0, 255).astype(np.uint8)


def save_luma(plane, path) -> None:
    """Write `plane` as an 8-bit grayscale PNG.

    Samples are rounded half away from zero and clamped. The file is written
    to a temporary name first and renamed into place, so a failed write
    never leaves a partial file behind.
    """
    path = Path(path)
    img = Image.fromarray(to_uint8(plane), mode="L")
    directory = path.parent if str(path.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=".png", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            img.save(fh, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def pad_to_block_multiple(plane, block: int = BLOCK):
    """Edge-replicate `plane` up to the next multiple of `block` in each dimension.

    Returns ``(padded, (height, width))`` where the tuple is the original size.
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2 or plane.size == 0:
        raise ValueError(f"expected a non-empty 2-D plane, got shape {plane.shape}")
    h, w = plane.shape
    ph = -h % block
    pw = -w % block
    if ph or pw:
        plane = np.pad(plane, ((0, ph), (0, pw)), mode="edge")
    return plane, (h, w)


def crop(plane, size):
    h, w = size
    return plane[..., :h, :w]


@dataclass
class PatchBatch:
    """Aligned clean/degraded training pairs.

    Arrays are stacked along the first axis: ``clean`` and ``degraded`` are
    ``(n, p, p)``, ``coeffs`` is ``(n, p/8, p/8, 64)``.
    """

    clean: np.ndarray
    degraded: np.ndarray
    coeffs: np.ndarray
    table: np.ndarray
    patch_size: int
    seed: int
    qf: int
    sources: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.clean.shape[0]

    def __iter__(self) -> Iterator[tuple]:
        for i in range(len(self)):
            yield self.clean[i], self.degraded[i], self.coeffs[i], self.table

    def subset(self, index) -> "PatchBatch":
        index = np.atleast_1d(np.asarray(index))
        return PatchBatch(
            self.clean[index], self.degraded[index], self.coeffs[index], self.table,
            self.patch_size, self.seed, self.qf, [self.sources[i] for i in index] if self.sources else [],
        )


def load_corpus(paths: Sequence, min_size: int = 0):
    """Load luma planes, skipping (with a warning) any smaller than `min_size`."""
    planes, names = [], []
    for p in paths:
        plane = load_luma(p)
        if min(plane.shape) < min_size:
            log.warning("skipping %s: %dx%d is smaller than patch size %d", p, plane.shape[1], plane.shape[0], min_size)
            continue
        planes.append(plane)
        names.append(str(p))
    return planes, names


def sample_patches(corpus, patch_size: int, count: int, qf: int, seed: int) -> PatchBatch:
    """Draw `count` random crops from `corpus` and JPEG-degrade each one.

    `corpus` is a sequence of image paths, or of already loaded planes.
    Crops start at any pixel offset; degradation runs after cropping so each
    patch has its own block grid anchored at its top-left corner. The result
    depends only on the arguments.
    """
    from .jpeg_core import degrade, luminance_table

    if patch_size <= 0 or patch_size % BLOCK:
        raise ConfigurationError(f"patch_size must be a positive multiple of {BLOCK}, got {patch_size}")
    if count < 0:
        raise ConfigurationError(f"count must be non-negative, got {count}")
    if all(isinstance(c, np.ndarray) for c in corpus) and len(corpus):
        planes, names = [], []
        for i, c in enumerate(corpus):
            if min(c.shape) < patch_size:
                log.warning("skipping corpus plane %d: smaller than patch size %d", i, patch_size)
                continue
            planes.append(np.asarray(c, dtype=np.float64))
            names.append(f"<plane {i}>")
    else:
        planes, names = load_corpus(corpus, patch_size)
    if not planes:
        raise ConfigurationError(f"no usable image of at least {patch_size}x{patch_size} in corpus")

    table = luminance_table(qf)
    rng = np.random.default_rng(seed)
    nb = patch_size // BLOCK
    clean = np.empty((count, patch_size, patch_size))
    degraded = np.empty_like(clean)
    coeffs = np.empty((count, nb, nb, 64))
    sources = []
    for i in range(count):
        k = int(rng.integers(len(planes)))
        src = planes[k]
        y = int(rng.integers(src.shape[0] - patch_size + 1))
        x = int(rng.integers(src.shape[1] - patch_size + 1))
        patch = src[y:y + patch_size, x:x + patch_size]
        deg, cdct, _ = degrade(patch, qf)
        clean[i] = patch
        degraded[i] = deg
        coeffs[i] = cdct
        sources.append((names[k], y, x))
    return PatchBatch(clean, degraded, coeffs, table, patch_size, seed, qf, sources)
