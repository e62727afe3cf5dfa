import numpy as np
import pytest

from dmcnn.checkpoint import parameter_digest, to_bytes
from dmcnn.errors import ConfigurationError, NumericFault
from dmcnn.network import NetworkConfig
from dmcnn.tensor_engine import Tensor
from dmcnn.trainer import (
    AdamState,
    PlateauSchedule,
    Stage,
    TrainConfig,
    adam_step,
    split_corpus,
    train,
)

TINY_NET = NetworkConfig(base_channels=2)


def tiny_config(**over):
    base = dict(curriculum=[Stage(16, 20, 6)], batch_size=2, val_count=2, val_interval=2, seed=3)
    base.update(over)
    return TrainConfig(**base)


def test_adam_matches_reference_formula():
    cfg = TrainConfig()
    p = np.array([0.5, -1.0])
    params = {"w": Tensor(p.copy(), dtype=np.float64)}
    state = AdamState.zeros_like(params)
    m = v = np.zeros(2)
    rng = np.random.default_rng(0)
    for t in range(1, 6):
        g = rng.standard_normal(2)
        adam_step(params, {"w": g}, state, 0.01, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p = p - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(params["w"].data, p, rtol=1e-12)
    assert state.step == 5


def test_adam_refuses_to_continue_after_overflow():
    params = {"w": np.zeros(2, np.float32)}
    state = AdamState.zeros_like(params)
    with pytest.raises(NumericFault, match="'w'"):
        adam_step(params, {"w": np.array([1e30, 0.0], np.float32)}, state, 0.1)


def test_adam_rejects_mismatched_names():
    params = {"a": np.zeros(2), "b": np.zeros(1)}
    state = AdamState.zeros_like(params)
    with pytest.raises(KeyError, match="'b'"):
        adam_step(params, {"a": np.zeros(2)}, state, 0.1)


def test_plateau_divides_after_patience_misses():
    s = PlateauSchedule(1e-3, 3.0, 3)
    assert s.observe(10.0)
    for _ in range(2):
        assert not s.observe(11.0)
        assert s.lr == 1e-3
    s.observe(12.0)
    assert s.lr == pytest.approx(1e-3 / 3)
    for _ in range(3):
        s.observe(10.0)  # ties are not improvements
    assert s.lr == pytest.approx(1e-3 / 9)


def test_split_is_deterministic_and_disjoint(image_dir):
    paths = sorted(image_dir.iterdir())
    a = split_corpus(paths, 0.4, 1)
    assert a == split_corpus(paths, 0.4, 1)
    train_set, val = a
    assert len(val) == 2 and not set(train_set) & set(val)


@pytest.mark.parametrize("change", [
    {"curriculum": []}, {"curriculum": [Stage(20, 20, 5)]}, {"curriculum": [Stage(16, 0, 5)]},
    {"curriculum": [Stage(32, 20, 5), Stage(16, 20, 5)]}, {"lr_decay_factor": 1.0},
    {"select": "median"}, {"val_fraction": 1.0}, {"precision": "float16"},
])
def test_invalid_training_configs(change):
    with pytest.raises(ConfigurationError):
        tiny_config(**change).validate()


def test_config_round_trip():
    cfg = tiny_config(curriculum=[[16, 10, 2], {"patch_size": 24, "qf": 10, "steps": 3}])
    assert cfg.curriculum[1] == Stage(24, 10, 3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigurationError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})


def test_training_is_bit_reproducible(image_dir):
    a = train(image_dir, tiny_config(), net_config=TINY_NET)
    b = train(image_dir, tiny_config(), net_config=TINY_NET)
    assert to_bytes(a) == to_bytes(b)
    c = train(image_dir, tiny_config(seed=4), net_config=TINY_NET)
    assert to_bytes(a) != to_bytes(c)


def test_log_records_and_monotone_learning_rate(image_dir):
    records = []
    cfg = tiny_config(curriculum=[Stage(16, 20, 12)], val_interval=1, plateau_patience=1, lr_init=0.05)
    train(image_dir, cfg, net_config=TINY_NET, log_fn=records.append)
    vals = [r for r in records if r["event"] == "val"]
    assert [r["step"] for r in vals] == list(range(1, 13))
    assert set(vals[0]) == {"event", "step", "stage", "lr", "train_loss", "val_loss"}
    lrs = [r["lr"] for r in vals]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    for a, b in zip(lrs, lrs[1:]):
        assert b == a or b == pytest.approx(a / 3)
    assert lrs[-1] < lrs[0]


def test_stages_continue_from_the_previous_parameters(image_dir):
    one = tiny_config(curriculum=[Stage(16, 20, 4)])
    two = tiny_config(curriculum=[Stage(16, 20, 4), Stage(24, 20, 2)])
    first = train(image_dir, one, net_config=TINY_NET)
    records = []
    train(image_dir, two, net_config=TINY_NET, log_fn=records.append)
    stages = [r for r in records if r["event"] == "stage"]
    assert stages[1]["digest"] == first.digest


def test_warm_start_keeps_the_initial_parameters(image_dir):
    init = train(image_dir, tiny_config(), net_config=TINY_NET)
    records = []
    out = train(image_dir, tiny_config(seed=9), init=init, log_fn=records.append)
    assert records[0]["event"] == "stage" and records[0]["digest"] == init.digest
    assert out.init_digest == parameter_digest(init.model)
    with pytest.raises(ConfigurationError, match="base_channels"):
        train(image_dir, tiny_config(), init=init, net_config=NetworkConfig(base_channels=3))


def test_select_last_reports_final_validation(image_dir):
    records = []
    ck = train(image_dir, tiny_config(select="last"), net_config=TINY_NET, log_fn=records.append)
    last = [r for r in records if r["event"] == "val"][-1]
    assert ck.step == last["step"] and ck.validation_loss == last["val_loss"]


def test_missing_corpus(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        train(tmp_path / "absent", tiny_config(), net_config=TINY_NET)
    (tmp_path / "empty").mkdir()
    with pytest.raises(ConfigurationError, match="no images"):
        train(tmp_path / "empty", tiny_config(), net_config=TINY_NET)
