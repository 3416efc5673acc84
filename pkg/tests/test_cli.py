import json
import subprocess
import sys

import numpy as np
import pytest

from vrwkv import checkpoint
from vrwkv.cli import EXIT_DIVERGED, EXIT_FAIL, EXIT_OK, EXIT_USAGE, main

TINY_TRAIN = ["--embed-dim", "8", "--hidden-dim", "16", "--depth", "1", "--patch-size", "4",
              "--num-classes", "4", "--image-size", "16", "--n-train", "32", "--batch-size", "8",
              "--warmup-steps", "2"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# --------------------------------------------------------------------------
# flops


def test_flops_high_resolution_count(capsys):
    code, out, _ = run(capsys, "flops", "--T", 16384, "--C", 192)
    assert code == EXIT_OK and out.strip() == "40894464"


def test_flops_per_layer_and_total(capsys):
    code, out, _ = run(capsys, "flops", "--T", 196, "--C", 192, "--depth", 2)
    per = 13 * 196 * 192
    assert out.split("\n")[:4] == [str(per), f"layer 0 {per}", f"layer 1 {per}", f"total {2 * per}"]


def test_flops_bad_size(capsys):
    code, _, err = run(capsys, "flops", "--T", 0, "--C", 4)
    assert code == EXIT_USAGE and "positive" in err


# --------------------------------------------------------------------------
# oracle-check and gradcheck


def test_oracle_check_pass_with_report(capsys, tmp_path):
    code, out, _ = run(capsys, "oracle-check", "--T", "1,5", "--C", "1,3", "--seeds", 4,
                       "--out", tmp_path)
    assert code == EXIT_OK and "PASS: 16 cases" in out
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["pass"] and len(report["rows"]) == 4
    for row in report["rows"]:
        if row["T"] == 1:
            assert row["worst_max_abs_err"] == 0.0
    assert json.loads((tmp_path / "config.json").read_text())["command"] == "oracle-check"


def test_oracle_check_injected_bug_names_case(capsys):
    code, out, _ = run(capsys, "oracle-check", "--T", "8", "--C", "4", "--seeds", 2, "--inject-bug")
    assert code == EXIT_FAIL
    assert "FAIL T=8 C=4 seed=0" in out and "FAIL T=8 C=4 seed=1" in out


def test_oracle_check_rejects_f32(capsys):
    code, _, _ = run(capsys, "oracle-check", "--precision", "f32")
    assert code == EXIT_USAGE


def test_gradcheck_zero_upstream_smoke(capsys):
    code, out, _ = run(capsys, "gradcheck", "--scope", "kernel", "--T", 4, "--C", 2, "--seeds", 1,
                       "--zero-gy")
    assert code == EXIT_OK
    assert "max |analytic| 0.000e+00  max |numeric| 0.000e+00" in out


def test_gradcheck_shift_scope(capsys):
    code, out, _ = run(capsys, "gradcheck", "--scope", "shift", "--seeds", 1)
    assert code == EXIT_OK and "PASS: scope shift, tol 1e-05" in out
    classes = {line.split()[0] for line in out.splitlines()[:-1]}
    assert {"quad.x", "quad.mu", "causal.literal.mu", "bidirectional.x"} <= classes


def test_gradcheck_impossible_tolerance_fails(capsys):
    code, out, _ = run(capsys, "gradcheck", "--scope", "kernel", "--T", 4, "--C", 2, "--seeds", 1,
                       "--tol", 0)
    assert code == EXIT_FAIL and "FAIL: scope kernel" in out


# --------------------------------------------------------------------------
# stability


def test_stability_safe_passes(capsys):
    code, out, _ = run(capsys, "stability", "--T", 4096)
    assert code == EXIT_OK and "safe f32" in out and "safe f64" in out


def test_stability_unsafe_overflows(capsys):
    code, out, _ = run(capsys, "stability", "--T", 4096, "--unsafe")
    assert code == EXIT_DIVERGED and "overflow detected" in out


def test_stability_unsafe_small_does_not_overflow(capsys):
    code, out, _ = run(capsys, "stability", "--T", 8, "--wmax", 0.1, "--unsafe")
    assert code == EXIT_FAIL and "did not overflow" in out


# --------------------------------------------------------------------------
# training, eval and config replay


def test_train_lr_zero_constant_loss(capsys, tmp_path):
    code, _, _ = run(capsys, "train", *TINY_TRAIN, "--batch-size", 32, "--steps", 5, "--lr", 0,
                     "--out", tmp_path)
    assert code == EXIT_OK
    losses = [json.loads(line)["loss"] for line in open(tmp_path / "log.jsonl")]
    assert len(losses) == 6 and max(losses) - min(losses) < 1e-5


def test_train_replay_from_config(capsys, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "train", *TINY_TRAIN, "--steps", 6, "--seed", 3, "--out", a)[0] == EXIT_OK
    code, _, _ = run(capsys, "train", "--config", a / "config.json", "--out", b)
    assert code == EXIT_OK
    assert (a / "checkpoint.vrwk").read_bytes() == (b / "checkpoint.vrwk").read_bytes()
    assert (a / "log.jsonl").read_text() == (b / "log.jsonl").read_text()
    cfg_a = json.loads((a / "config.json").read_text())
    cfg_b = json.loads((b / "config.json").read_text())
    assert {k: v for k, v in cfg_a.items() if k != "out"} == {k: v for k, v in cfg_b.items()
                                                              if k != "out"}


def test_flags_override_config(capsys, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"T": 100, "C": 2}))
    code, out, _ = run(capsys, "flops", "--config", tmp_path / "c.json", "--C", 3)
    assert out.strip() == str(13 * 100 * 3)


def test_train_divergence_exit_code(capsys, tmp_path):
    code, _, err = run(capsys, "train", *TINY_TRAIN, "--steps", 40, "--lr", 1e6,
                       "--warmup-steps", 0, "--out", tmp_path)
    assert code == EXIT_DIVERGED and "optimizer_blowup" in err


def test_eval_checkpoint(capsys, tmp_path):
    run(capsys, "train", *TINY_TRAIN, "--steps", 3, "--out", tmp_path)
    code, out, _ = run(capsys, "eval", "--checkpoint", tmp_path / "checkpoint.vrwk", "--n", 8,
                       "--task-seed", 9)
    rec = json.loads(out)
    assert code == EXIT_OK and rec["n"] == 8 and rec["task_seed"] == 9
    assert 0.0 <= rec["accuracy"] <= 1.0


def test_eval_errors(capsys, tmp_path):
    assert run(capsys, "eval")[0] == EXIT_USAGE
    (tmp_path / "junk").write_bytes(b"nope")
    assert run(capsys, "eval", "--checkpoint", tmp_path / "junk")[0] == EXIT_USAGE


# --------------------------------------------------------------------------
# erf and bench outputs


def test_erf_outputs(capsys, tmp_path):
    code, out, _ = run(capsys, "erf", "--embed-dim", 8, "--hidden-dim", 16, "--patch-size", 2,
                       "--erf-size", 16, "--out", tmp_path)
    assert code == EXIT_OK and "nonzero cells 64" in out
    erf = np.loadtxt(tmp_path / "erf.csv", delimiter=",")
    assert erf.shape == (8, 8) and erf.max() == 1.0
    assert (tmp_path / "erf.svg").read_text().startswith("<svg")


def test_erf_from_checkpoint(capsys, tmp_path):
    run(capsys, "train", *TINY_TRAIN, "--steps", 2, "--out", tmp_path / "t")
    code, out, _ = run(capsys, "erf", "--checkpoint", tmp_path / "t" / "checkpoint.vrwk",
                       "--erf-size", 16, "--out", tmp_path / "e")
    assert code == EXIT_OK and "grid 4x4" in out


def test_erf_indivisible_size(capsys, tmp_path):
    code, _, _ = run(capsys, "erf", "--erf-size", 30, "--out", tmp_path)
    assert code == EXIT_USAGE


def test_bench_writes_csv(capsys, tmp_path):
    code, out, _ = run(capsys, "bench", "--mechanism", "biwkv,quadratic", "--T", "64,128",
                       "--C", 4, "--reps", 5, "--out", tmp_path)
    assert code == EXIT_OK
    lines = (tmp_path / "bench.csv").read_text().splitlines()
    assert lines[0] == "mechanism,T,C,reps,median_seconds,activation_bytes" and len(lines) == 5


def test_bench_check_fails_without_large_T(capsys, tmp_path):
    code, out, _ = run(capsys, "bench", "--mechanism", "biwkv", "--T", "64,128", "--C", 4,
                       "--reps", 5, "--check", "--out", tmp_path)
    assert code == EXIT_FAIL and "no doubling pair" in out


def test_bench_usage_errors(capsys, tmp_path):
    assert run(capsys, "bench", "--mechanism", "flash", "--out", tmp_path)[0] == EXIT_USAGE
    assert run(capsys, "bench", "--T", "128,64", "--out", tmp_path)[0] == EXIT_USAGE


# --------------------------------------------------------------------------
# usage errors


def test_unwritable_output_directory(capsys, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code, _, err = run(capsys, "erf", "--erf-size", 16, "--patch-size", 2, "--out", blocker / "x")
    assert code == EXIT_USAGE and "output directory" in err


def test_unknown_config_key(capsys, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"steps": 5}))
    code, _, err = run(capsys, "flops", "--config", tmp_path / "c.json")
    assert code == EXIT_USAGE and "steps" in err


def test_unreadable_config(capsys, tmp_path):
    assert run(capsys, "flops", "--config", tmp_path / "missing.json")[0] == EXIT_USAGE
    (tmp_path / "list.json").write_text("[1, 2]")
    assert run(capsys, "flops", "--config", tmp_path / "list.json")[0] == EXIT_USAGE


def test_bad_model_config(capsys, tmp_path):
    code, _, _ = run(capsys, "train", "--embed-dim", 6, "--out", tmp_path)
    assert code == EXIT_USAGE


def test_argparse_errors_exit_two():
    with pytest.raises(SystemExit) as e:
        main(["gradcheck", "--scope", "everything"])
    assert e.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == EXIT_USAGE


def test_console_script_entry():
    r = subprocess.run([sys.executable, "-m", "vrwkv.cli", "flops", "--T", "2", "--C", "3"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip() == "78"


def test_checkpoint_written_by_train_is_loadable(capsys, tmp_path):
    run(capsys, "train", *TINY_TRAIN, "--steps", 2, "--out", tmp_path)
    meta, params = checkpoint.load(tmp_path / "checkpoint.vrwk")
    assert meta["model"]["embed_dim"] == 8 and params["pos_embed"].dtype == np.float32
