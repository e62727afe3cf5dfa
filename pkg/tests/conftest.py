import numpy as np
import pytest
from PIL import Image

from dmcnn.tensor_engine import Tape, backward

ACCEPTANCE_LINES = []


def synthetic_plane(h, w, seed=0):
    """Integer-valued test image: smooth gradient, a hard-edged square, mild texture."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:h, 0:w]
    base = 60 + 120 * (x / max(w - 1, 1)) * (0.5 + 0.5 * np.sin(y / 7.0))
    square = ((y > h // 4) & (y < 3 * h // 4) & (x > w // 3) & (x < 2 * w // 3)) * 50.0
    texture = rng.normal(0, 6, (h, w))
    return np.clip(np.round(base + square + texture), 0, 255)


@pytest.fixture
def plane():
    return synthetic_plane(48, 64)


@pytest.fixture
def image_dir(tmp_path):
    """A directory of five grayscale PNGs of assorted sizes."""
    d = tmp_path / "images"
    d.mkdir()
    for i, (h, w) in enumerate([(72, 80), (64, 64), (90, 77), (80, 96), (64, 72)]):
        Image.fromarray(synthetic_plane(h, w, seed=i).astype(np.uint8)).save(d / f"im{i}.png")
    return d


def numeric_grad_check(fn, tensors, coords=20, step=1e-6, seed=0):
    """Compare tape gradients of ``sum(fn() * R)`` with central differences.

    Returns the worst relative error over `coords` random coordinates of
    every tensor in `tensors` (all float64, requires_grad).
    """
    rng = np.random.default_rng(seed)
    with Tape() as tape:
        out = fn()
    proj = rng.standard_normal(out.shape)
    grads = backward(out, tape, wrt=tensors, grad_output=proj)

    def objective():
        return float(np.sum(fn().data * proj))

    worst = 0.0
    for t in tensors:
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
        for i in picks:
            keep = flat[i]
            flat[i] = keep + step
            up = objective()
            flat[i] = keep - step
            down = objective()
            flat[i] = keep
            num = (up - down) / (2 * step)
            ana = grads[t].reshape(-1)[i]
            scale = max(abs(num), abs(ana), 1e-6)
            worst = max(worst, abs(num - ana) / scale)
    return worst


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
