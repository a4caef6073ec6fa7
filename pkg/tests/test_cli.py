import json
import time
from pathlib import Path

import numpy as np
import pytest

from graspref import cli
from graspref.nn import load_checkpoint


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree_bytes(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    cfg = out / "gen.json"
    cfg.write_text(json.dumps({"cloud_points": 512}))
    assert run("gen-data", "--config", cfg, "--out", out / "d", "--train-objects", 1, "--test-objects", 1,
               "--views", 8, "--seed", 3) == 0
    return out / "d", cfg


def test_gen_data_counts(data_dir):
    d, _ = data_dir
    man = json.loads((d / "run_manifest.json").read_text())
    assert man["examples"] == 16
    assert len(man["objects"]) == 2 and len(man["test_objects"]) == 1
    assert (d / "library" / "library.txt").exists()


def test_gen_data_byte_identical(data_dir, tmp_path):
    d, cfg = data_dir
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "again", "--train-objects", 1,
               "--test-objects", 1, "--views", 8, "--seed", 3) == 0
    for sub in ("dataset", "library"):
        assert tree_bytes(d / sub) == tree_bytes(tmp_path / "again" / sub)


def test_missing_output_dir_is_created(data_dir, tmp_path):
    d, _ = data_dir
    out = tmp_path / "a" / "b" / "c"
    assert run("eval", "--data", d, "--out", out, "--combinations", "Naive+Visible", "--trials", 1) == 0
    assert (out / "results.csv").exists()


def test_unwritable_output(data_dir, tmp_path, capsys):
    d, _ = data_dir
    blocker = tmp_path / "file"
    blocker.write_text("x")
    rc = run("eval", "--data", d, "--out", blocker / "sub", "--combinations", "Naive+Visible")
    assert rc == 2
    assert "not writable" in capsys.readouterr().err


def test_missing_out_and_data(tmp_path, capsys):
    assert run("eval", "--data", tmp_path / "nope") == 2
    assert run("eval", "--data", tmp_path / "nope", "--out", tmp_path / "o") == 2
    err = capsys.readouterr().err
    assert "output directory is required" in err and "does not exist" in err


def test_train_one_epoch_fast(data_dir, tmp_path):
    d, _ = data_dir
    t0 = time.perf_counter()
    assert run("train-recon", "--data", d, "--out", tmp_path, "--epochs", 1) == 0
    assert time.perf_counter() - t0 < 60
    assert (tmp_path / "recon.ckpt").exists()
    lines = (tmp_path / "recon_loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss" and len(lines) == 2


def test_resume_continues_training(data_dir, tmp_path):
    d, _ = data_dir
    assert run("train-proposal", "--data", d, "--out", tmp_path / "straight", "--epochs", 4) == 0
    assert run("train-proposal", "--data", d, "--out", tmp_path / "first", "--epochs", 2) == 0
    assert run("train-proposal", "--data", d, "--out", tmp_path / "second", "--epochs", 2,
               "--resume", tmp_path / "first" / "proposal.ckpt") == 0
    _, h1, v1 = load_checkpoint(tmp_path / "straight" / "proposal.ckpt")
    _, h2, v2 = load_checkpoint(tmp_path / "second" / "proposal.ckpt")
    assert h1["epoch"] == h2["epoch"] == 4
    assert len(v2["curve"]) == 4
    np.testing.assert_array_equal(v1["curve"], v2["curve"])
    np.testing.assert_array_equal(v1["params"], v2["params"])


def test_resume_with_lr_decay_matches_straight_run(data_dir, tmp_path):
    d, _ = data_dir
    common = ("--data", d, "--lr", 1e-2)
    cfg = tmp_path / "decay.json"
    cfg.write_text(json.dumps({"lr_decay": 0.5}))
    assert run("train-proposal", *common, "--config", cfg, "--out", tmp_path / "a", "--epochs", 3) == 0
    assert run("train-proposal", *common, "--config", cfg, "--out", tmp_path / "b", "--epochs", 1) == 0
    assert run("train-proposal", *common, "--config", cfg, "--out", tmp_path / "c", "--epochs", 2,
               "--resume", tmp_path / "b" / "proposal.ckpt") == 0
    _, _, v1 = load_checkpoint(tmp_path / "a" / "proposal.ckpt")
    _, _, v2 = load_checkpoint(tmp_path / "c" / "proposal.ckpt")
    np.testing.assert_array_equal(v1["params"], v2["params"])


def test_corrupt_checkpoint_exit_code(data_dir, tmp_path, capsys):
    d, _ = data_dir
    assert run("train-proposal", "--data", d, "--out", tmp_path, "--epochs", 1) == 0
    ck = tmp_path / "proposal.ckpt"
    raw = bytearray(ck.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    ck.write_bytes(bytes(raw))
    assert run("train-proposal", "--data", d, "--out", tmp_path / "r", "--resume", ck) == 3
    assert "corrupt" in capsys.readouterr().err


def test_oracle_eval_without_models_and_report(data_dir, tmp_path):
    d, _ = data_dir
    out = tmp_path / "ev"
    assert run("eval", "--data", d, "--out", out, "--combinations", "Library+Visible,Naive+Visible",
               "--trials", 1, "--scenario", "VisibleGrasp") == 0
    rows = (out / "results.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 4 * 2
    assert run("report", "--results", out / "results.csv", "--out", tmp_path / "rep") == 0
    assert (tmp_path / "rep" / "summary.csv").read_bytes() == (out / "summary.csv").read_bytes()
    assert (tmp_path / "rep" / "report.txt").read_text() == (out / "report.txt").read_text()


def test_eval_rejects_missing_models(data_dir, tmp_path, capsys):
    d, _ = data_dir
    assert run("eval", "--data", d, "--out", tmp_path, "--combinations", "GPNet+SRNet") == 2
    assert "missing models" in capsys.readouterr().err


def test_unknown_config_keys(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 2, "learnin_rate": 0.1}))
    assert run("train-recon", "--config", cfg, "--out", tmp_path) == 2
    assert "learnin_rate" in capsys.readouterr().err


def test_precedence_defaults_config_env_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 7, "batch_size": 8, "learning_rate": 0.5}))
    args = cli.build_parser().parse_args(["train-recon", "--config", str(cfg), "--out", "o", "--epochs", "9"])
    env = {"GRASPREF_BATCH_SIZE": "16", "GRASPREF_EPOCHS": "11", "GRASPREF_SEED": "5"}
    got = cli.resolve_config("train-recon", args, env)
    assert got["epochs"] == 9            # flag beats env and config
    assert got["batch_size"] == 16       # env beats config
    assert got["learning_rate"] == 0.5   # config beats default
    assert got["seed"] == 5
    assert got["domain_samples"] == cli.DEFAULTS["train-recon"]["domain_samples"]


def test_env_out_and_bad_env_value(tmp_path):
    args = cli.build_parser().parse_args(["report"])
    assert cli.resolve_config("report", args, {"GRASPREF_OUT": str(tmp_path)})["out"] == str(tmp_path)
    args = cli.build_parser().parse_args(["train-recon", "--out", "o"])
    with pytest.raises(cli.ConfigError):
        cli.resolve_config("train-recon", args, {"GRASPREF_EPOCHS": "many"})
