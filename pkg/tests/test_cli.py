import json
import os
import subprocess
import sys
import time

import pytest

from ptx.cli import EXIT_IO, EXIT_NAN, EXIT_USAGE, MANIFEST_NAME, main


def run(*args):
    return main([str(a) for a in args])


def _dir_bytes(d, skip=(MANIFEST_NAME,)):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*"))
            if p.is_file() and p.name not in skip}


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    d = tmp_path_factory.mktemp("smoke") / "data"
    assert run("gen", "--out", d, "--count", 10, "--seed", 0, "--mode", "partial_instances") == 0
    return d


def test_gen_twice_gives_identical_directories(tmp_path, capsys):
    assert run("gen", "--out", tmp_path / "a", "--count", 10, "--seed", 0) == 0
    assert run("gen", "--out", tmp_path / "b", "--count", 10, "--seed", 0) == 0
    assert _dir_bytes(tmp_path / "a") == _dir_bytes(tmp_path / "b")
    assert "instances" in capsys.readouterr().out
    man = json.loads((tmp_path / "a" / MANIFEST_NAME).read_text())
    assert man["command"] == "gen" and man["seed"] == 0 and "duration_s" in man


def test_gen_invalid_spec_leaves_nothing(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"classes": ["disk"]}))
    assert run("gen", "--spec", spec, "--out", tmp_path / "out") == EXIT_USAGE
    assert "two classes" in capsys.readouterr().err
    assert sorted(p.name for p in tmp_path.iterdir()) == ["spec.json"]
    spec.write_text("{broken")
    assert run("gen", "--spec", spec, "--out", tmp_path / "out") == EXIT_USAGE


def test_gen_200_scenes_is_fast(tmp_path):
    t0 = time.time()
    assert run("gen", "--out", tmp_path / "d", "--count", 200) == 0
    assert time.time() - t0 < 60


def test_bank_variant_guards(tmp_path, smoke, capsys):
    assert run("train", "--data", smoke, "--variant", "none", "--bank", "synthetic", "--out", tmp_path) == EXIT_USAGE
    assert run("train", "--data", smoke, "--variant", "parallel_text", "--out", tmp_path) == EXIT_USAGE
    assert run("train", "--data", smoke, "--variant", "parallel_text", "--bank", tmp_path / "nope",
               "--out", tmp_path) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "refusing --bank" in err and "needs a text bank" in err


def test_train_eval_round_trip(tmp_path, smoke, capsys):
    bank = tmp_path / "bank"
    assert run("bank", "--out", bank) == 0
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"lr": 1e-3, "epochs": 3, "seed": 0}))
    out = tmp_path / "run"
    assert run("train", "--data", smoke, "--config", cfg, "--variant", "parallel_text", "--bank", bank,
               "--out", out) == 0
    losses = [float(l.split(",")[1]) for l in (out / "loss.csv").read_text().splitlines()[1:]]
    n = len(losses) // 3
    assert sum(losses[-n:]) / n < sum(losses[:n]) / n
    assert {p.name for p in out.iterdir()} == {"checkpoint", "loss.csv", "bank", MANIFEST_NAME}
    assert run("eval", "--checkpoint", out / "checkpoint", "--data", smoke, "--out", tmp_path / "ev") == 0
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert 0 <= metrics["miou"] <= 100 and metrics["count"] == 20
    # rerun with the same inputs: identical checkpoint bytes
    out2 = tmp_path / "run2"
    assert run("train", "--data", smoke, "--config", cfg, "--variant", "parallel_text", "--bank", bank,
               "--out", out2) == 0
    assert _dir_bytes(out / "checkpoint") == _dir_bytes(out2 / "checkpoint")


def test_train_resume(tmp_path, smoke):
    args = ["train", "--data", smoke, "--variant", "parallel", "--epochs", 2]
    assert run(*args, "--out", tmp_path / "a", "--max-steps", 5) == 0
    assert run(*args, "--out", tmp_path / "b", "--max-steps", 8, "--resume", tmp_path / "a" / "checkpoint") == 0
    assert run(*args, "--out", tmp_path / "c", "--max-steps", 8, "--resume", tmp_path / "zzz") == EXIT_USAGE


def test_eval_missing_checkpoint(tmp_path, smoke):
    assert run("eval", "--checkpoint", tmp_path / "none", "--data", smoke, "--out", tmp_path / "e") == EXIT_USAGE


def test_corrupt_checkpoint_is_io_error(tmp_path, smoke):
    assert run("train", "--data", smoke, "--variant", "decoder_only", "--out", tmp_path / "r", "--max-steps", 2) == 0
    f = tmp_path / "r" / "checkpoint" / "decoder.hyper.ptx"
    f.write_bytes(f.read_bytes()[:20])
    assert run("eval", "--checkpoint", tmp_path / "r" / "checkpoint", "--data", smoke,
               "--out", tmp_path / "e") == EXIT_IO


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_abort_exit_code(tmp_path, smoke):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lr": 1e30, "variant": "parallel"}))
    assert run("train", "--data", smoke, "--config", cfg, "--out", tmp_path / "r", "--max-steps", 40) == EXIT_NAN


def test_params_reports_fraction(tmp_path, capsys):
    assert run("params", "--out", tmp_path) == 0
    info = json.loads((tmp_path / "params.json").read_text())
    assert info["trainable_fraction"] < 0.10
    assert "fraction 0.09" in capsys.readouterr().out


def test_gradcheck_small_model(tmp_path, capsys):
    cfg = tmp_path / "m.json"
    cfg.write_text(json.dumps({"image_size": 32, "embed_dim": 32, "depth": 1, "decoder_dim": 32, "text_dim": 16,
                               "bottleneck": 8, "mlp_ratio": 2}))
    assert run("gradcheck", "--model-config", cfg, "--coords", 4, "--out", tmp_path / "g") == 0
    out = capsys.readouterr().out
    assert "worst relative error" in out
    assert json.loads((tmp_path / "g" / "gradcheck.json").read_text())["worst"] <= 1e-4


def test_ablate_table1_emits_four_rows(tmp_path):
    assert run("ablate", "table1", "--out", tmp_path, "--seeds", 0, "--train-scenes", 2, "--test-scenes", 2,
               "--epochs", 1) == 0
    rows = json.loads((tmp_path / "table1.json").read_text())["rows"]
    assert len(rows) == 4
    assert (tmp_path / "table1.txt").is_file() and (tmp_path / MANIFEST_NAME).is_file()


def test_ablate_categories(tmp_path):
    assert run("ablate", "categories", "--out", tmp_path, "--seeds", 0, "--train-scenes", 2, "--test-scenes", 3,
               "--epochs", 1) == 0
    table = json.loads((tmp_path / "categories.json").read_text())
    assert len(table["rows"]) == 4


def test_usage_error_exit_code_and_console_script():
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == EXIT_USAGE
    env = dict(os.environ, PTX_PRECISION="f64")
    out = subprocess.run([sys.executable, "-m", "ptx.cli", "params", "--variant", "parallel"],
                         capture_output=True, text=True, env=env)
    assert out.returncode == 0 and "trainable" in out.stdout
