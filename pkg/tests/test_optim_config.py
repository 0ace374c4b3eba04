import json

import numpy as np
import pytest

from jacmatch.config import ConfigError, ExperimentConfig
from jacmatch.optim import Optimizer, OptimizerConfig, Schedule
import tiny


def test_schedule_drops():
    s = Schedule(1e-3, (4, 8), 0.1)
    assert s.at(0) == 1e-3 and s.at(3) == 1e-3
    assert s.at(4) == pytest.approx(1e-4) and s.at(8) == pytest.approx(1e-5)


@pytest.mark.parametrize("kwargs", [dict(lr=0.0), dict(lr=-1.0), dict(milestones=(5, 5)),
                                    dict(milestones=(6, 2))])
def test_schedule_validation(kwargs):
    with pytest.raises(ValueError):
        Schedule(**kwargs)


def test_unknown_optimizer_rejected():
    with pytest.raises(ValueError, match="unknown optimizer"):
        OptimizerConfig("rmsprop")


def test_adam_first_step_is_lr_times_sign():
    opt = Optimizer(OptimizerConfig("adam", Schedule(0.1)))
    params = {"w": np.array([1.0, -2.0, 0.5])}
    opt.step(params, {"w": np.array([3.0, -0.5, 1e-3])}, 0)
    # first Adam step: m_hat = g, v_hat = g^2, so the move is lr * g / (|g| + eps)
    g = np.array([3.0, -0.5, 1e-3])
    np.testing.assert_allclose(params["w"], np.array([1.0, -2.0, 0.5]) - 0.1 * g / (np.abs(g) + 1e-8),
                               rtol=1e-13)


def test_sgd_momentum_accumulates():
    opt = Optimizer(OptimizerConfig("sgd-momentum", Schedule(0.5), momentum=0.9))
    params = {"w": np.array([0.0])}
    opt.step(params, {"w": np.array([1.0])}, 0)
    opt.step(params, {"w": np.array([1.0])}, 0)
    # v1 = 1, v2 = 1.9; w = -0.5 - 0.95
    np.testing.assert_allclose(params["w"], [-1.45])


def test_optimizer_state_round_trip():
    cfg = OptimizerConfig("adam", Schedule(0.01))
    a = Optimizer(cfg)
    params = {"w": np.ones(3)}
    a.step(params, {"w": np.array([1.0, 2.0, 3.0])}, 0)
    b = Optimizer(cfg)
    b.load_state_tensors(a.state_tensors())
    pa, pb = dict(params), dict(params)
    a.step(pa, {"w": np.array([0.5, 0.5, 0.5])}, 0)
    b.step(pb, {"w": np.array([0.5, 0.5, 0.5])}, 0)
    assert np.array_equal(pa["w"], pb["w"])


def test_config_defaults_and_milestone(tmp_path):
    cfg = tiny.config(tmp_path, epochs=10)
    assert cfg["optimizer"]["milestones"] == [8]
    assert cfg["batch_size"] == 8 and cfg["loss"]["alpha"] == 1.0


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="Additional properties"):
        ExperimentConfig.from_dict(tiny.raw(tmp_path, learning_rate=1.0))
    with pytest.raises(ConfigError, match="loss"):
        ExperimentConfig.from_dict(tiny.raw(tmp_path, loss={"gama": 1.0}))


def test_semantic_errors(tmp_path):
    with pytest.raises(ConfigError, match="teacher"):
        tiny.config(tmp_path, loss={"beta": 1.0})
    with pytest.raises(ConfigError, match="noise"):
        tiny.config(tmp_path, task={"noise": -1.0})
    with pytest.raises(ConfigError):
        tiny.config(tmp_path, optimizer={"milestones": [3, 1]})


def test_hash_ignores_seeds_and_out_dir(tmp_path):
    a = tiny.config(tmp_path)
    b = ExperimentConfig.from_dict(tiny.raw(tmp_path / "elsewhere", seeds=[4, 5]))
    c = tiny.config(tmp_path, epochs=4)
    assert a.hash() == b.hash() != c.hash()


def test_load_from_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(tiny.raw(tmp_path)))
    assert ExperimentConfig.load(path).hash() == tiny.config(tmp_path).hash()
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(bad)
