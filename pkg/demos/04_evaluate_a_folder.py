"""Score a folder of images the way the benchmark tables do.

Writes a few sample photographs to a temporary folder, then reports the
JPEG baseline at qf 10 and 20 as an aligned table plus the tab-separated
lines the CLI ``eval --report`` writes.
"""
# %%
import tempfile
from pathlib import Path

from PIL import Image
from skimage import data

from dmcnn.metrics import evaluate_dataset

folder = Path(tempfile.mkdtemp()) / "clean"
folder.mkdir()
for name in ("camera", "astronaut", "coffee", "coins"):
    Image.fromarray(getattr(data, name)()).save(folder / f"{name}.png")

# %%
# Colour images are scored on their BT.601 luma.
for qf in (10, 20):
    report = evaluate_dataset(folder, qf=qf, label=f"JPEG, qf={qf}")
    print(report.to_table())

# %%
print(report.to_lines())
