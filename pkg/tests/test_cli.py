import subprocess
import sys

import numpy as np
import pytest

from pcformer.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, load_model, main, save_model
from pcformer.model import Corrector, ModelConfig
from pcformer.state import load_trajectory
from pcformer.toy_data import ballistic_states

TINY = """\
width = 16
width_s = 4
width_t = 4
width_b = 4
width_self = 4
enc_layers = 1
enc_heads = 2
enc_rotary_dim = 6
dec_layers = 1
dec_heads = 2
dec_rotary_dim = 6
ffn_hidden = 16
head_hidden = 8
radius = 0.1
window = 3
epochs = 1
warmup_steps = 2
total_steps = 20
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def test_count_params_paper_head(capsys):
    assert main(["count-params", "--paper-head"]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "1385478"


def test_count_params_config(capsys, tiny_cfg):
    assert main(["count-params", "--config", str(tiny_cfg)]) == EXIT_OK
    out = dict(line.split(" = ") for line in capsys.readouterr().out.splitlines())
    cfg = ModelConfig(width=16, width_s=4, width_t=4, width_b=4, width_self=4, enc_layers=1, enc_heads=2,
                      enc_rotary_dim=6, dec_layers=1, dec_heads=2, dec_rotary_dim=6, ffn_hidden=16, head_hidden=(8,))
    assert int(out["total"]) == sum(p.numel() for p in Corrector(cfg).parameters())


def test_dump_config_roundtrip(tmp_path, capsys, tiny_cfg):
    assert main(["train", "--config", str(tiny_cfg), "--dump-config"]) == EXIT_OK
    first = capsys.readouterr().out
    (tmp_path / "d.cfg").write_text(first)
    assert main(["train", "--config", str(tmp_path / "d.cfg"), "--dump-config"]) == EXIT_OK
    assert capsys.readouterr().out == first


def test_config_error_exit_code_and_line(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("width = 16\nbogus = 1\n")
    assert main(["count-params", "--config", str(tmp_path / "bad.cfg")]) == EXIT_VALIDATION
    assert "bad.cfg:2" in capsys.readouterr().err


def test_usage_error():
    with pytest.raises(SystemExit) as err:
        main(["rollout", "--ckpt", "x"])
    assert err.value.code == EXIT_USAGE


def test_zero_checkpoint_rollout_is_ballistic(tmp_path, capsys):
    assert main(["generate", "--scenario", "ballistic", "--out", str(tmp_path / "d"), "--count", "1",
                 "--particles", "6", "--frames", "8"]) == EXIT_OK
    model = Corrector(ModelConfig(width=16, enc_heads=2, dec_heads=2, enc_rotary_dim=6, dec_rotary_dim=6))
    save_model(model, tmp_path / "zero.ckpt")
    init = tmp_path / "d" / "ballistic_0000.traj"
    out = tmp_path / "p.traj"
    assert main(["rollout", "--ckpt", str(tmp_path / "zero.ckpt"), "--init", str(init), "--steps", "8",
                 "--out", str(out)]) == EXIT_OK
    ref = load_trajectory(init)
    pred = load_trajectory(out)
    x, _ = ballistic_states(ref.positions[0].astype(float), ref.velocities[0].astype(float), (0, 0, -9.81),
                            np.arange(8) * ref.dt)
    np.testing.assert_allclose(pred.positions, x, atol=1e-5)
    capsys.readouterr()
    assert main(["eval", "--pred", str(out), "--ref", str(init)]) == EXIT_OK
    report = dict(line.split(" = ") for line in capsys.readouterr().out.splitlines())
    assert float(report["position_mse"]) < 1e-10 and int(report["frames"]) == 7
    assert "frames_per_second" in report


def test_eval_self_is_zero(tmp_path, capsys):
    main(["generate", "--scenario", "floor", "--out", str(tmp_path), "--count", "1", "--particles", "4",
          "--frames", "3"])
    t = str(tmp_path / "floor_0000.traj")
    capsys.readouterr()
    assert main(["eval", "--pred", t, "--ref", t, "--out", str(tmp_path / "r.txt")]) == EXIT_OK
    report = dict(line.split(" = ") for line in (tmp_path / "r.txt").read_text().splitlines())
    assert float(report["position_mse"]) == 0 and float(report["velocity_mse"]) == 0


def test_train_rollout_inverse_pipeline(tmp_path, capsys, tiny_cfg):
    d = tmp_path / "data"
    assert main(["generate", "--scenario", "slope", "--out", str(d), "--count", "10", "--seed", "3",
                 "--frames", "6"]) == EXIT_OK
    ck = tmp_path / "m.ckpt"
    cfg = tmp_path / "s.cfg"
    cfg.write_text(TINY + "attr_dim = 2\n")
    assert main(["train", "--data", str(d), "--config", str(cfg), "--out", str(ck)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "best_step = " in out
    assert (tmp_path / "m.ckpt.csv").read_text().startswith("step,train_loss,val_loss,lr")
    model = load_model(ck)
    assert model.cfg.attr_dim == 2
    # attribute statistics of the training split are baked into the saved config
    assert len(model.cfg.attr_shift) == 2 and model.cfg.attr_scale[1] > 0
    assert main(["inverse-design", "--ckpt", str(ck), "--scene", str(d / "slope_0009.traj"), "--target", "0.3",
                 "--mu0", "0.2", "--iters", "2", "--steps", "3", "--curve", str(tmp_path / "inv.csv")]) == EXIT_OK
    assert "mu = " in capsys.readouterr().out
    assert len((tmp_path / "inv.csv").read_text().splitlines()) == 3


def test_missing_sidecar_is_validation_error(tmp_path, capsys):
    (tmp_path / "x.ckpt").write_bytes(b"")
    (tmp_path / "t.traj").write_bytes(b"")
    assert main(["rollout", "--ckpt", str(tmp_path / "x.ckpt"), "--init", str(tmp_path / "t.traj"), "--steps", "3",
                 "--out", str(tmp_path / "o.traj")]) == EXIT_VALIDATION
    assert "checkpoint.load" in capsys.readouterr().err


def test_numeric_failure_exit_code(monkeypatch, capsys):
    from pcformer import cli
    from pcformer.simulator import RolloutDivergence

    def boom(path):
        raise RolloutDivergence(2, "positions")

    monkeypatch.setattr(cli, "load_trajectory", boom)
    assert cli.main(["eval", "--pred", "a", "--ref", "b"]) == EXIT_NUMERIC
    assert "RolloutDivergence" in capsys.readouterr().err


def test_gradcheck_module_filter(capsys):
    assert main(["gradcheck", "--module", "substrate.softmax"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "substrate.softmax" in out and "all 1 checks passed" in out
    assert main(["gradcheck", "--module", "nothing"]) == EXIT_USAGE


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "pcformer.cli", "count-params", "--paper-head"],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0 and res.stdout.strip() == "1385478"
