import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmcnn import jpeg_core as jc
from dmcnn.errors import ConfigurationError
from dmcnn.network import NetworkConfig, avg_pool, build, downscale_target, loss, restore
from dmcnn.tensor_engine import Tape, backward, no_grad

from conftest import synthetic_plane


def small_model(seed=0, dtype=np.float64, channels=4, perturb_dct=True):
    model = build(NetworkConfig(base_channels=channels), seed=seed, dtype=dtype)
    if perturb_dct:
        # the DCT output projection starts at zero; give it weight so its gradients are exercised
        w = model.params["dct.dec2.weight"]
        w.data = np.random.default_rng(seed).normal(0, 0.05, w.shape).astype(w.dtype)
    return model


def inputs(h, w, qf=20, seed=0, n=None):
    planes = [synthetic_plane(h, w, seed + i) for i in range(n or 1)]
    degraded, cdct = zip(*[jc.degrade(p, qf)[:2] for p in planes])
    clean = np.stack(planes)
    return (clean if n else clean[0]), (np.stack(degraded) if n else degraded[0]), \
        (np.stack(cdct) if n else cdct[0]), jc.luminance_table(qf)


def test_layer_counts_match_the_configured_depths():
    model = build(NetworkConfig(base_channels=4))
    assert model.pixel_conv_count() == 15
    assert model.dct_conv_count() == 9


@settings(max_examples=8, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 2))
def test_multi_scale_shapes(bh, bw, n):
    model = small_model(channels=2)
    _, degraded, cdct, table = inputs(8 * bh, 8 * bw, n=n)
    with no_grad():
        out = model.forward(degraded, cdct, table)
    h, w = 8 * bh, 8 * bw
    assert out.o0.shape == (n, 1, h, w) and out.od.shape == (n, 1, h, w)
    assert out.o1.shape == (n, 1, h // 2, w // 2)
    assert out.o2.shape == (n, 1, h // 4, w // 4)


def test_dct_branch_output_stays_in_the_quantization_box():
    model = small_model()
    w = model.params["dct.dec2.weight"]
    w.data *= 400  # push many coefficients far outside the box
    _, degraded, cdct, table = inputs(24, 32)
    with no_grad():
        out = model.forward(degraded, cdct, table)
    lo, hi = jc.feasible_interval(cdct, table)
    coef = out.coeffs.data[0].transpose(1, 2, 0)
    assert np.all(coef >= lo - 1e-9) and np.all(coef <= hi + 1e-9)
    assert np.any(np.isclose(coef, lo)) or np.any(np.isclose(coef, hi))


def test_fresh_dct_branch_reproduces_the_jpeg_decode():
    model = build(NetworkConfig(base_channels=4), dtype=np.float64)
    _, degraded, cdct, table = inputs(16, 24)
    with no_grad():
        od = model.forward(degraded, cdct, table).od.data[0, 0]
    np.testing.assert_allclose(od, jc.block_idct(cdct), atol=1e-9)


def test_output_derivative_in_r_is_dct_estimate_minus_input():
    model = small_model()
    _, degraded, cdct, table = inputs(16, 16)
    r = model.params["mix.r"]
    seed = np.random.default_rng(3).standard_normal((1, 1, 16, 16))
    with Tape() as tape:
        out = model.forward(degraded, cdct, table)
    g = backward(out.o0, tape, wrt=[r], grad_output=seed)[r]
    expected = np.sum(seed * (out.od.data - degraded[None, None]))
    np.testing.assert_allclose(g, expected, rtol=1e-10)

    def objective(value):
        r.data = np.array(value)
        with no_grad():
            return float(np.sum(model.forward(degraded, cdct, table).o0.data * seed))

    base = float(r.data)
    fd = (objective(base + 1e-6) - objective(base - 1e-6)) / 2e-6
    r.data = np.array(base)
    np.testing.assert_allclose(fd, expected, rtol=1e-6)


def test_end_to_end_loss_gradient_on_an_8x8_input():
    model = small_model(seed=5)
    clean, degraded, cdct, table = inputs(8, 8, qf=10, seed=2)
    params = model.parameters()
    with Tape() as tape:
        value = loss(model.forward(degraded, cdct, table), clean, model.config)
    grads = backward(value, tape, wrt=params)

    def objective():
        with no_grad():
            return float(loss(model.forward(degraded, cdct, table), clean, model.config).data)

    rng = np.random.default_rng(9)
    names = list(model.params)
    worst = 0.0
    for pick in rng.choice(len(names), 10, replace=False):
        t = model.params[names[pick]]
        flat = t.data.reshape(-1)
        i = rng.integers(flat.size)
        keep = flat[i]
        flat[i] = keep + 1e-6
        up = objective()
        flat[i] = keep - 1e-6
        down = objective()
        flat[i] = keep
        num = (up - down) / 2e-6
        ana = grads[t].reshape(-1)[i]
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    assert worst < 1e-3


def test_loss_combines_scales_with_the_configured_weights():
    model = small_model()
    clean, degraded, cdct, table = inputs(16, 16)
    with no_grad():
        out = model.forward(degraded, cdct, table)
        value = float(loss(out, clean, model.config).data)
    cfg = model.config
    terms = [np.mean((out.o0.data[0, 0] - clean) ** 2),
             cfg.theta * np.mean((out.o1.data[0, 0] - avg_pool(clean, 2)) ** 2),
             cfg.theta ** 2 * np.mean((out.o2.data[0, 0] - avg_pool(clean, 4)) ** 2),
             cfg.lam * np.mean((out.od.data[0, 0] - clean) ** 2)]
    np.testing.assert_allclose(value, sum(terms), rtol=1e-10)


def test_downscaled_targets():
    x = np.arange(16.0).reshape(4, 4)
    np.testing.assert_array_equal(downscale_target(x, 1), [[2.5, 4.5], [10.5, 12.5]])
    np.testing.assert_array_equal(downscale_target(x, 2), [[7.5]])
    with pytest.raises(ValueError):
        downscale_target(x, 3)


def test_restore_handles_unaligned_images():
    model = small_model(dtype=np.float32)
    p = synthetic_plane(21, 30)
    degraded, cdct, table = jc.degrade(p, 20)
    out = restore(model, degraded, cdct, table)
    assert out.shape == p.shape
    assert out.min() >= 0 and out.max() <= 255
    with pytest.raises(ValueError, match="coefficient grid"):
        restore(model, degraded, cdct[:1], table)


def test_build_is_seed_deterministic():
    a = build(NetworkConfig(base_channels=3), seed=4)
    b = build(NetworkConfig(base_channels=3), seed=4)
    c = build(NetworkConfig(base_channels=3), seed=5)
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
    assert any(a.params[n].data.tobytes() != c.params[n].data.tobytes() for n in a.params)


@pytest.mark.parametrize("change", [
    {"pixel_depth": 14}, {"dct_depth": 8}, {"bottleneck_dilations": ()}, {"base_channels": 0},
    {"theta": 1.5}, {"scales": 2},
])
def test_invalid_configs_are_rejected(change):
    with pytest.raises(ConfigurationError):
        NetworkConfig(**change).validate()


def test_config_dict_round_trip_and_alternative_depths():
    cfg = NetworkConfig(base_channels=5, bottleneck_dilations=(2, 4), pixel_depth=14, dct_depth=6)
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg
    model = build(cfg)
    assert model.pixel_conv_count() == 14 and model.dct_conv_count() == 6
    with pytest.raises(ConfigurationError, match="unknown"):
        NetworkConfig.from_dict({"width": 3})
