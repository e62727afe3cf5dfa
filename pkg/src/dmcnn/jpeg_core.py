"""Baseline-JPEG luma degradation in the DCT domain.

Coefficient grids are arrays of shape ``(..., blocks_h, blocks_w, 64)``;
channel ``c = 8*u + v`` holds vertical frequency ``u`` and horizontal
frequency ``v`` of the block at that grid position. Quantization tables are
``(8, 8)`` integer arrays indexed the same way.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .imaging import BLOCK, crop, pad_to_block_multiple, round_half_away

# IJG / ITU-T T.81 Annex K luminance table
BASE_LUMINANCE_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)

LEVEL_SHIFT = 128.0


def dct_matrix(n: int = BLOCK) -> np.ndarray:
    """Orthonormal DCT-II matrix ``M`` with ``M[u, x]`` the u-th basis at sample x."""
    x = np.arange(n)
    u = x[:, None]
    m = np.cos((2 * x[None, :] + 1) * u * np.pi / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


DCT = dct_matrix()


def dct_basis() -> np.ndarray:
    """Basis images as a ``(64, 8, 8)`` array, ``basis[8u+v, x, y] = M[u, x] M[v, y]``."""
    return np.einsum("ux,vy->uvxy", DCT, DCT).reshape(64, BLOCK, BLOCK)


def luminance_table(qf: int) -> np.ndarray:
    """IJG luminance quantization table for quality factor `qf` (1..100)."""
    if isinstance(qf, bool) or int(qf) != qf or not 1 <= qf <= 100:
        raise ValueError(f"quality factor must be an integer in 1..100, got {qf!r}")
    qf = int(qf)
    scale = 5000 // qf if qf < 50 else 200 - 2 * qf
    table = (BASE_LUMINANCE_TABLE * scale + 50) // 100
    return np.clip(table, 1, 255)


def _check_table(table) -> np.ndarray:
    table = np.asarray(table)
    if table.shape != (BLOCK, BLOCK):
        raise ValueError(f"quantization table must be 8x8, got shape {table.shape}")
    return table.reshape(64).astype(np.float64)


def block_dct(plane) -> np.ndarray:
    """Level-shifted orthonormal 8x8 block DCT of a plane (or a stack of planes)."""
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape[-2:]
    if h % BLOCK or w % BLOCK:
        raise ValueError(f"plane dimensions must be multiples of {BLOCK}, got {h}x{w}; pad first")
    lead = plane.shape[:-2]
    blocks = (plane - LEVEL_SHIFT).reshape(*lead, h // BLOCK, BLOCK, w // BLOCK, BLOCK)
    coef = np.einsum("ux,...ixjy,vy->...ijuv", DCT, blocks, DCT, optimize=True)
    return coef.reshape(*lead, h // BLOCK, w // BLOCK, 64)


def block_idct(grid) -> np.ndarray:
    """Inverse of :func:`block_dct`, including the +128 shift. Not clamped."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape[-1] != 64:
        raise ValueError(f"coefficient grid must have 64 channels, got shape {grid.shape}")
    bh, bw = grid.shape[-3:-1]
    lead = grid.shape[:-3]
    coef = grid.reshape(*lead, bh, bw, BLOCK, BLOCK)
    blocks = np.einsum("ux,...ijuv,vy->...ixjy", DCT, coef, DCT, optimize=True)
    return blocks.reshape(*lead, bh * BLOCK, bw * BLOCK) + LEVEL_SHIFT


def quantize(grid, table) -> np.ndarray:
    """``round(O / Q) * Q`` per coefficient, rounding half away from zero."""
    q = _check_table(table)
    grid = np.asarray(grid, dtype=np.float64)
    return round_half_away(grid / q) * q


def degrade(plane, qf: int):
    """JPEG-degrade a luma plane at quality `qf`.

    Returns ``(degraded, cdct, table)``. ``degraded`` has the input's size
    and holds 8-bit sample values (rounded and clamped to [0, 255]) as a
    decoder would emit them; ``cdct`` is the quantized coefficient grid of
    the edge-padded plane.
    """
    table = luminance_table(qf)
    padded, size = pad_to_block_multiple(plane)
    cdct = quantize(block_dct(padded), table)
    decoded = np.clip(round_half_away(block_idct(cdct)), 0.0, 255.0)
    return crop(decoded, size), cdct, table


def feasible_interval(cdct, table):
    """Coefficient box ``[C - Q/2, C + Q/2]`` that the original must lie in."""
    half = _check_table(table) / 2.0
    cdct = np.asarray(cdct, dtype=np.float64)
    return cdct - half, cdct + half


def dru_project(x, cdct, table) -> np.ndarray:
    """Clamp coefficients `x` into the quantization box of `cdct` (no leaky slope)."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = feasible_interval(cdct, table)
    if x.shape != lo.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs cdct {lo.shape}")
    return np.minimum(np.maximum(x, lo), hi)


# -- file formats -----------------------------------------------------------

def format_table(table) -> str:
    table = np.asarray(table)
    return "".join(" ".join(str(int(v)) for v in row) + "\n" for row in table)


def parse_table(text: str) -> np.ndarray:
    rows = [line.split() for line in text.splitlines() if line.strip() and not line.lstrip().startswith("#")]
    try:
        table = np.array([[int(v) for v in row] for row in rows], dtype=np.int64)
    except ValueError as exc:
        raise ValueError(f"malformed quantization table: {exc}") from exc
    if table.shape != (BLOCK, BLOCK):
        raise ValueError(f"quantization table must have 8 rows of 8 integers, got shape {table.shape}")
    if table.min() < 1 or table.max() > 255:
        raise ValueError("quantization steps must lie in [1, 255]")
    return table


def write_table(path, table) -> None:
    atomic_write(path, format_table(table).encode("ascii"))


def read_table(path) -> np.ndarray:
    return parse_table(Path(path).read_text())


def dump_coeffs(grid) -> bytes:
    """Serialize a ``(bh, bw, 64)`` grid.

    Layout: ``uint32 blocks_h``, ``uint32 blocks_w`` (little-endian, 8 bytes),
    then ``bh * bw * 64`` little-endian float64 values in C order.
    """
    grid = np.asarray(grid, dtype="<f8")
    if grid.ndim != 3 or grid.shape[2] != 64:
        raise ValueError(f"expected a (blocks_h, blocks_w, 64) grid, got {grid.shape}")
    return struct.pack("<II", grid.shape[0], grid.shape[1]) + np.ascontiguousarray(grid).tobytes()


def load_coeffs(data: bytes) -> np.ndarray:
    if len(data) < 8:
        raise ValueError("coefficient dump truncated: missing shape header")
    bh, bw = struct.unpack("<II", data[:8])
    expected = 8 + bh * bw * 64 * 8
    if len(data) != expected:
        raise ValueError(f"coefficient dump has {len(data)} bytes, expected {expected} for {bh}x{bw} blocks")
    return np.frombuffer(data, dtype="<f8", offset=8).reshape(bh, bw, 64).astype(np.float64)


def write_coeffs(path, grid) -> None:
    atomic_write(path, dump_coeffs(grid))


def read_coeffs(path) -> np.ndarray:
    return load_coeffs(Path(path).read_bytes())


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent if str(path.parent) else ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
