import json

import numpy as np
import pytest

from jacmatch import nn
from jacmatch.cli import main
import tiny


def _write(path, raw):
    path.write_text(json.dumps(raw))
    return path


def test_train_ok(tmp_path, capsys):
    cfg = _write(tmp_path / "c.json", tiny.raw(tmp_path / "runs"))
    assert main(["train", str(cfg), "--seed", "2"]) == 0
    assert "test accuracy" in capsys.readouterr().out
    assert list((tmp_path / "runs").glob("tiny-*-s2/result.json"))


def test_train_stop_and_resume(tmp_path):
    cfg = _write(tmp_path / "c.json", tiny.raw(tmp_path / "runs"))
    assert main(["train", str(cfg), "--stop-after", "1"]) == 0
    assert main(["train", str(cfg), "--resume"]) == 0
    assert list((tmp_path / "runs").glob("tiny-*-s0/model.jmck"))


def test_out_dir_flag_overrides(tmp_path):
    cfg = _write(tmp_path / "c.json", tiny.raw(tmp_path / "ignored"))
    assert main(["train", str(cfg), "--out-dir", str(tmp_path / "here"), "--seeds", "0,1"]) == 0
    assert len(list((tmp_path / "here").glob("tiny-*"))) == 2
    assert not (tmp_path / "ignored").exists()


def test_unknown_key_exit_2(tmp_path, capsys):
    cfg = _write(tmp_path / "c.json", tiny.raw(tmp_path, learning_rate=0.1))
    assert main(["train", str(cfg)]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_config_exit_2(tmp_path):
    assert main(["train", str(tmp_path / "absent.json")]) == 2


def test_nan_teacher_exit_3(tmp_path, capsys):
    teacher = nn.vgg_2t((2, 4, 4), 3, width=4).init_params(0)
    teacher.params["head.out.bias"] = np.full(3, np.nan)
    nn.save_network(tmp_path / "t.jmck", teacher)
    raw = tiny.with_teacher(tmp_path, loss={"beta": 1.0}, teacher={"checkpoint": str(tmp_path / "t.jmck")})
    assert main(["train", str(_write(tmp_path / "c.json", raw))]) == 3
    assert "activation term" in capsys.readouterr().err


def test_report_mixed_hashes_exit_4(tmp_path):
    a = _write(tmp_path / "a.json", tiny.raw(tmp_path / "runs"))
    b = _write(tmp_path / "b.json", tiny.raw(tmp_path / "runs", epochs=2))
    assert main(["train", str(a)]) == 0 and main(["train", str(b)]) == 0
    dirs = sorted(str(p) for p in (tmp_path / "runs").glob("tiny-*"))
    assert main(["report", *dirs]) == 4


def test_report_writes_csv(tmp_path):
    cfg = _write(tmp_path / "c.json", tiny.raw(tmp_path / "runs"))
    assert main(["train", str(cfg), "--seeds", "0,1"]) == 0
    dirs = sorted(str(p) for p in (tmp_path / "runs").glob("tiny-*"))
    assert main(["report", *dirs, "--out", str(tmp_path / "r.csv")]) == 0
    assert (tmp_path / "r.csv").read_text().startswith("name,config_hash,n_seeds")


def test_distill_grid_cli(tmp_path):
    cfg = _write(tmp_path / "c.json", tiny.with_teacher(tmp_path / "runs", epochs=1))
    assert main(["distill-grid", str(cfg), "--n-per-class", "2", "--methods",
                 "Cross-Entropy (CE) training;CE + match activations"]) == 0
    assert (tmp_path / "runs" / "distill_grid.csv").exists()


def test_distill_grid_without_teacher_exit_2(tmp_path):
    cfg = _write(tmp_path / "c.json", tiny.raw(tmp_path))
    assert main(["distill-grid", str(cfg)]) == 2


def test_robustness_grid_cli(tmp_path):
    cfg = _write(tmp_path / "c.json", tiny.raw(tmp_path / "runs", epochs=1))
    assert main(["robustness-grid", str(cfg), "--lambdas", "0,1", "--sigmas", "0,0.3"]) == 0
    assert (tmp_path / "runs" / "robustness_grid.json").exists()


def test_ablate_tap_mismatch_exit_2(tmp_path, capsys):
    raw = tiny.with_teacher(tmp_path, loss={"gamma": 1.0, "attention_weight": 1.0,
                                            "jac_mode": "max-attention-pixel", "tap_pairs": [[1, 1]]})
    assert main(["ablate", str(_write(tmp_path / "c.json", raw)), "--axis", "tap-depth", "--values", "1-2"]) == 2
    assert "student tap 2" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["verify", "exactness", "--samples", "20000"],
                                  ["verify", "bound", "--seeds", "20"],
                                  ["verify", "superset", "--seeds", "10"],
                                  ["verify", "noise-equiv", "--pairs", "3", "--curvature"]])
def test_verify_labs_pass(tmp_path, argv):
    assert main(argv + ["--out-dir", str(tmp_path)]) == 0
    assert list(tmp_path.glob("verify_*.json"))


def test_verify_failing_invariant_exit_4(tmp_path):
    # the first-order expansion leaves an O(sigma^3)-scale residual; slope check fails
    assert main(["verify", "noise-equiv", "--pairs", "3", "--out-dir", str(tmp_path)]) == 4
