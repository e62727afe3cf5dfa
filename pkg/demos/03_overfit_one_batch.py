"""Train on a single batch and watch the loss fall.

A width-16 network fits eight 56x56 patches at qf=20 for 300 steps, about
a minute on one CPU core. The loss drops by two orders of magnitude, but
this small, short run still ends slightly below plain JPEG in PSNR. The
acceptance run (width 32, 500 steps) clears JPEG by about 3 dB.
"""
# %%
import time

import numpy as np
from skimage import data

from dmcnn.imaging import sample_patches
from dmcnn.metrics import psnr
from dmcnn.network import NetworkConfig, build
from dmcnn.tensor_engine import no_grad
from dmcnn.trainer import AdamState, TrainConfig, batch_loss, train_step

# %%
# Eight random crops of the cameraman, each JPEG-degraded after cropping
# so its block grid starts at its own corner.
batch = sample_patches([data.camera().astype(np.float64)], 56, 8, qf=20, seed=1)
jpeg = np.mean([psnr(c, d) for c, d in zip(batch.clean, batch.degraded)])
print(f"JPEG baseline on the batch: {jpeg:.2f} dB")

# %%
model = build(NetworkConfig(base_channels=16), seed=0)
print(f"{model.num_parameters():,} parameters")
cfg = TrainConfig()
state = AdamState.zeros_like(model.params)
start = time.perf_counter()
for step in range(1, 301):
    value = train_step(model, batch, state, cfg.lr_init, cfg)
    if step % 50 == 0 or step == 1:
        print(f"step {step:>3}: loss {value:9.2f}  ({time.perf_counter() - start:.0f}s)")

# %%
# Most of the early drop comes from the randomly initialised pixel heads
# learning to reproduce their input; beating JPEG needs more width or steps.
# The full-scale output is clamped to the valid range before scoring.
with no_grad():
    out = model.forward(batch.degraded, batch.coeffs, batch.table)
    final = float(batch_loss(model, batch).data)
restored = np.clip(out.o0.data[:, 0].astype(np.float64), 0, 255)
ours = np.mean([psnr(c, r) for c, r in zip(batch.clean, restored)])
print(f"final loss {final:.2f}; restored {ours:.2f} dB vs JPEG {jpeg:.2f} dB ({ours - jpeg:+.2f})")
print(f"learned mixing weight r = {float(model.params['mix.r'].data):.3f}")
