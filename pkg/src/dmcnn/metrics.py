"""Full-reference quality metrics: PSNR, SSIM and PSNR-B.

All functions take 2-D luma planes on the [0, 255] scale and evaluate the
whole image (no border shaving).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

PEAK = 255.0
PSNR_CAP = 100.0

IMAGE_SUFFIXES = (".png", ".pgm", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff", ".ppm")


def _pair(ref, test):
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: reference {ref.shape} vs test {test.shape}")
    if ref.ndim != 2:
        raise ValueError(f"expected 2-D planes, got shape {ref.shape}")
    return ref, test


def _psnr_from_mse(err: float) -> float:
    if err <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(PEAK ** 2 / err))


def psnr(ref, test) -> float:
    """PSNR in dB; identical images report the 100 dB cap."""
    ref, test = _pair(ref, test)
    return _psnr_from_mse(float(np.mean((ref - test) ** 2)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(ref, test, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with a Gaussian window over all fully-covered positions.

    Local statistics are Gaussian-weighted means (not sample estimates),
    with ``C1 = (k1*255)**2`` and ``C2 = (k2*255)**2``.
    """
    ref, test = _pair(ref, test)
    if min(ref.shape) < window:
        raise ValueError(f"image {ref.shape} smaller than the {window}x{window} SSIM window")
    w = gaussian_window(window, sigma)
    c1 = (k1 * PEAK) ** 2
    c2 = (k2 * PEAK) ** 2

    def filt(a):
        return convolve2d(a, w, mode="valid")

    mu_x, mu_y = filt(ref), filt(test)
    sxx = filt(ref * ref) - mu_x ** 2
    syy = filt(test * test) - mu_y ** 2
    sxy = filt(ref * test) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def blocking_effect_factor(plane, block: int = 8) -> float:
    """Blocking-effect factor of Yim & Bovik.

    Mean squared difference of neighbouring pixels straddling block
    boundaries minus that of all other neighbouring pairs, scaled by
    ``log2(block) / log2(min(H, W))`` and floored at zero. The block grid is
    anchored at the top-left pixel.
    """
    y = np.asarray(plane, dtype=np.float64)
    if block < 2:
        raise ValueError(f"block must be >= 2, got {block}")
    h, w = y.shape
    dh = (y[:, :-1] - y[:, 1:]) ** 2    # pairs (x, x+1)
    dv = (y[:-1, :] - y[1:, :]) ** 2
    hb = (np.arange(w - 1) % block) == block - 1
    vb = (np.arange(h - 1) % block) == block - 1
    n_b = h * hb.sum() + w * vb.sum()
    n_c = h * (~hb).sum() + w * (~vb).sum()
    if n_b == 0 or n_c == 0:
        return 0.0
    d_b = (dh[:, hb].sum() + dv[vb, :].sum()) / n_b
    d_c = (dh[:, ~hb].sum() + dv[~vb, :].sum()) / n_c
    if d_b <= d_c:
        return 0.0
    eta = math.log2(block) / math.log2(min(h, w))
    return float(eta * (d_b - d_c))


def psnr_b(ref, test, block: int = 8) -> float:
    """PSNR with the blocking-effect factor of `test` added to the MSE."""
    ref, test = _pair(ref, test)
    err = float(np.mean((ref - test) ** 2))
    if err == 0:
        return PSNR_CAP
    return _psnr_from_mse(err + blocking_effect_factor(test, block))


@dataclass
class ImageScore:
    filename: str
    psnr: float
    ssim: float
    psnr_b: float


@dataclass
class MetricReport:
    images: list = field(default_factory=list)
    label: str = ""

    @property
    def count(self) -> int:
        return len(self.images)

    def mean(self, key: str) -> float:
        if not self.images:
            return float("nan")
        return float(np.mean([getattr(s, key) for s in self.images]))

    @property
    def psnr(self):
        return self.mean("psnr")

    @property
    def ssim(self):
        return self.mean("ssim")

    @property
    def psnr_b(self):
        return self.mean("psnr_b")

    def to_lines(self) -> str:
        """Machine-readable form: a header then one tab-separated row per image."""
        rows = ["filename\tpsnr\tssim\tpsnr_b"]
        rows += [f"{s.filename}\t{s.psnr:.6f}\t{s.ssim:.6f}\t{s.psnr_b:.6f}" for s in self.images]
        return "\n".join(rows) + "\n"

    def to_json(self) -> str:
        return json.dumps({
            "label": self.label,
            "count": self.count,
            "mean": {"psnr": self.psnr, "ssim": self.ssim, "psnr_b": self.psnr_b},
            "images": [vars(s) for s in self.images],
        }, indent=2)

    def to_table(self) -> str:
        """Aligned text table: one row per image plus the mean."""
        name_w = max([len("Image")] + [len(s.filename) for s in self.images] + [len("Mean")])
        head = f"{'Image':<{name_w}}  {'PSNR(dB)':>9}  {'SSIM':>6}  {'PSNR-B(dB)':>10}"
        lines = [self.label] if self.label else []
        lines += [head, "-" * len(head)]
        for s in self.images:
            lines.append(f"{s.filename:<{name_w}}  {s.psnr:>9.2f}  {s.ssim:>6.3f}  {s.psnr_b:>10.2f}")
        lines.append("-" * len(head))
        lines.append(f"{'Mean':<{name_w}}  {self.psnr:>9.2f}  {self.ssim:>6.3f}  {self.psnr_b:>10.2f}")
        return "\n".join(lines) + "\n"


def score(filename, ref, test) -> ImageScore:
    return ImageScore(filename, psnr(ref, test), ssim(ref, test), psnr_b(ref, test))


def list_images(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def evaluate_dataset(ref_dir, test_dir=None, model=None, qf: int | None = None, label: str = "") -> MetricReport:
    """Score every clean image in `ref_dir`.

    The test images come from `test_dir` (matched by file stem), or are
    produced on the fly: JPEG-degraded at `qf`, then restored by `model` if
    one is given. Images are processed in filename order.
    """
    from .imaging import load_luma
    from .jpeg_core import degrade
    from .network import restore

    refs = list_images(ref_dir)
    if not refs:
        raise FileNotFoundError(f"no images found in {ref_dir}")
    if test_dir is None and qf is None:
        raise ValueError("give either test_dir or qf (optionally with model)")
    tests = {}
    if test_dir is not None:
        for p in list_images(test_dir):
            tests.setdefault(p.stem, p)
    report = MetricReport(label=label)
    for ref_path in refs:
        clean = load_luma(ref_path)
        if test_dir is not None:
            match = tests.get(ref_path.stem)
            if match is None:
                raise FileNotFoundError(f"no test image matching {ref_path.name} in {test_dir}")
            out = load_luma(match)
        else:
            out, cdct, table = degrade(clean, qf)
            if model is not None:
                out = restore(model, out, cdct, table)
        report.images.append(score(ref_path.name, clean, out))
    return report
