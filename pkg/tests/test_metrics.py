import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from dmcnn import jpeg_core as jc
from dmcnn.metrics import (
    PSNR_CAP,
    blocking_effect_factor,
    evaluate_dataset,
    psnr,
    psnr_b,
    ssim,
)
from dmcnn.network import NetworkConfig, build

from conftest import synthetic_plane


def pair(seed, h=40, w=48, noise=8.0):
    rng = np.random.default_rng(seed)
    a = synthetic_plane(h, w, seed)
    return a, np.clip(a + rng.normal(0, noise, a.shape), 0, 255)


def bef_by_loops(y, block=8):
    """Blocking-effect factor written pair by pair."""
    h, w = y.shape
    sb = sc = nb = nc = 0
    for i in range(h):
        for j in range(w - 1):
            d = (y[i, j] - y[i, j + 1]) ** 2
            if (j + 1) % block == 0:
                sb, nb = sb + d, nb + 1
            else:
                sc, nc = sc + d, nc + 1
    for i in range(h - 1):
        for j in range(w):
            d = (y[i, j] - y[i + 1, j]) ** 2
            if (i + 1) % block == 0:
                sb, nb = sb + d, nb + 1
            else:
                sc, nc = sc + d, nc + 1
    eta = math.log2(block) / math.log2(min(h, w))
    return max(0.0, eta * (sb / nb - sc / nc))


@pytest.mark.parametrize("seed", range(4))
def test_psnr_and_ssim_match_scikit_image(seed):
    a, b = pair(seed)
    assert psnr(a, b) == pytest.approx(peak_signal_noise_ratio(a, b, data_range=255), abs=1e-10)
    ref = structural_similarity(a, b, data_range=255, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    # scikit-image averages over a reflect-padded full image; ours covers only fully-windowed positions
    ours = ssim(a, b)
    assert ours == pytest.approx(ref, abs=0.02)


def test_ssim_matches_windowed_reference_on_interior():
    from scipy.ndimage import gaussian_filter

    a, b = pair(7, 64, 64)
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2

    def g(x):
        return gaussian_filter(x, 1.5, truncate=3.5, mode="reflect")

    mx, my = g(a), g(b)
    sxx, syy, sxy = g(a * a) - mx ** 2, g(b * b) - my ** 2, g(a * b) - mx * my
    m = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2))
    assert ssim(a, b) == pytest.approx(m[5:-5, 5:-5].mean(), abs=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_blocking_factor_matches_loop_reference(seed):
    _, b = pair(seed, 37, 50)
    d, _, _ = jc.degrade(b, 10)
    for img in (b, d):
        assert blocking_effect_factor(img) == pytest.approx(bef_by_loops(img), rel=1e-12, abs=1e-12)


def test_jpeg_output_has_blocking():
    a = synthetic_plane(64, 64)
    d, _, _ = jc.degrade(a, 10)
    assert blocking_effect_factor(d) > 0
    assert psnr_b(a, d) < psnr(a, d)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([10, 30, 60]))
def test_psnr_b_never_exceeds_psnr(seed, qf):
    a, b = pair(seed, 32, 40, noise=3.0)
    d, _, _ = jc.degrade(b, qf)
    pb, p = psnr_b(a, d), psnr(a, d)
    assert pb <= p
    assert (pb == p) == (blocking_effect_factor(d) == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_ssim_is_symmetric(seed):
    a, b = pair(seed, 24, 24)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12


def test_psnr_falls_as_noise_grows():
    a = synthetic_plane(32, 32)
    noise = np.random.default_rng(0).standard_normal(a.shape)
    values = [psnr(a, a + s * noise) for s in (0.5, 1, 2, 4, 8, 16)]
    assert all(x > y for x, y in zip(values, values[1:]))


@pytest.mark.parametrize("seed", range(3))
def test_metrics_ignore_a_joint_horizontal_flip(seed):
    a, b = pair(seed, 40, 48)
    d, _, _ = jc.degrade(b, 15)
    fa, fd = a[:, ::-1], d[:, ::-1]
    assert psnr(fa, fd) == pytest.approx(psnr(a, d), abs=1e-12)
    assert ssim(fa, fd) == pytest.approx(ssim(a, d), abs=1e-12)
    assert psnr_b(fa, fd) == pytest.approx(psnr_b(a, d), abs=1e-12)


def test_identical_images_report_the_cap():
    a = synthetic_plane(16, 16)
    assert psnr(a, a) == psnr_b(a, a) == PSNR_CAP
    assert ssim(a, a) == pytest.approx(1.0)


def test_shape_mismatch_and_tiny_images():
    with pytest.raises(ValueError, match="shape"):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def _write(d, name, plane):
    Image.fromarray(plane.astype(np.uint8)).save(d / name)


def test_dataset_report_from_directories(tmp_path):
    ref, test = tmp_path / "ref", tmp_path / "test"
    ref.mkdir(), test.mkdir()
    planes = {f"img{i}": synthetic_plane(32, 40, i) for i in range(3)}
    for stem, p in planes.items():
        _write(ref, f"{stem}.png", p)
        _write(test, f"{stem}.png", jc.degrade(p, 20)[0])
    report = evaluate_dataset(ref, test, label="demo")
    assert [s.filename for s in report.images] == ["img0.png", "img1.png", "img2.png"]
    assert report.psnr == pytest.approx(np.mean([psnr(p, jc.degrade(p, 20)[0]) for p in planes.values()]))
    lines = report.to_lines().splitlines()
    assert lines[0] == "filename\tpsnr\tssim\tpsnr_b" and len(lines) == 4
    assert lines[1].split("\t")[0] == "img0.png"
    assert json.loads(report.to_json())["count"] == 3
    table = report.to_table()
    assert "Mean" in table and "PSNR-B(dB)" in table


def test_on_the_fly_baseline_equals_precomputed_directory(tmp_path):
    ref, test = tmp_path / "ref", tmp_path / "test"
    ref.mkdir(), test.mkdir()
    for i in range(2):
        p = synthetic_plane(40, 40, i)
        _write(ref, f"a{i}.png", p)
        _write(test, f"a{i}.png", jc.degrade(p, 10)[0])
    direct = evaluate_dataset(ref, qf=10)
    stored = evaluate_dataset(ref, test)
    assert direct.to_lines() == stored.to_lines()
    restored = evaluate_dataset(ref, qf=10, model=build(NetworkConfig(base_channels=2)))
    assert restored.count == 2


def test_missing_match_is_named(tmp_path):
    ref, test = tmp_path / "ref", tmp_path / "test"
    ref.mkdir(), test.mkdir()
    _write(ref, "lonely.png", synthetic_plane(16, 16))
    with pytest.raises(FileNotFoundError, match="lonely.png"):
        evaluate_dataset(ref, test)
