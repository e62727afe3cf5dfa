"""What JPEG does to a luma plane, one step at a time.

Run with ``python demos/01_jpeg_degradation.py``. Needs scikit-image for
the sample photograph.
"""
# %%
# Start from the classic cameraman photograph. Every module works on
# float64 planes holding values in [0, 255].
import numpy as np
from skimage import data

from dmcnn import jpeg_core as jc
from dmcnn.metrics import blocking_effect_factor, psnr, psnr_b, ssim

clean = data.camera().astype(np.float64)
print("plane:", clean.shape, clean.dtype, clean.min(), clean.max())

# %%
# The quantization table scales with the quality factor. At qf=10 the step
# for the highest frequency is 255, which throws that coefficient away in
# almost every block.
for qf in (10, 50, 90):
    t = jc.luminance_table(qf)
    print(f"qf={qf:>2}: DC step {t[0, 0]:>3}, top-right step {t[0, 7]:>3}, bottom-right step {t[7, 7]:>3}")

# %%
# The coefficient grid keeps one channel per frequency (channel 8u+v) at
# 1/8 of the image resolution. That is the layout the DCT branch consumes.
degraded, cdct, table = jc.degrade(clean, 10)
print("coefficient grid:", cdct.shape)
zeroed = np.mean(cdct == 0)
print(f"{zeroed:.0%} of quantized coefficients are exactly zero at qf=10")

# %%
# Quantization tells us more than the rounded value: the true coefficient
# must lie within half a step of it. Clamping any estimate into that box
# can only move it closer to the truth.
original = jc.block_dct(clean)
lo, hi = jc.feasible_interval(cdct, table)
print("original inside the box everywhere:", bool(np.all((original >= lo) & (original <= hi))))
guess = cdct + np.random.default_rng(0).normal(0, 40, cdct.shape)
print("error before clamping: %.1f, after: %.1f" % (
    np.abs(guess - original).mean(), np.abs(jc.dru_project(guess, cdct, table) - original).mean()))

# %%
# Blocking shows up as extra energy across block boundaries. PSNR-B adds
# that excess to the MSE, so it is lower than PSNR for JPEG output.
print(f"PSNR {psnr(clean, degraded):.2f} dB, SSIM {ssim(clean, degraded):.3f}, "
      f"PSNR-B {psnr_b(clean, degraded):.2f} dB")
print(f"blocking factor: clean {blocking_effect_factor(clean):.2f}, jpeg {blocking_effect_factor(degraded):.2f}")
