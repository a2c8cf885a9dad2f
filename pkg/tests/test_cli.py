"""Command-line interface: subcommand wiring, run-directory artifacts, the
sweep table shapes, and error exits."""

import csv
import json

import numpy as np
import pytest

from depthgate.cli import DEGRADED_ALPHA, LAMBDA_GRID, LAMBDA_SWEEP_COLUMNS, main


def micro_spec(tmp_path, **overrides):
    spec = {
        "name": "micro", "task": "copy", "mode": "tsa",
        "d": 16, "n_layers": 2, "n_heads": 2, "d_ff": 32, "context": 10,
        "lambda_depth": 0.001, "seed": 0, "steps": 12, "batch": 8,
        "lr": 3e-4, "schedule": "constant", "warmup": 2, "eval_interval": 6,
        "n_train": 64, "n_test": 16, "length": 3, "limit_bytes": 0,
    }
    spec.update(overrides)
    path = tmp_path / f"{spec['name']}.json"
    path.write_text(json.dumps(spec))
    return path, spec


def train_micro(tmp_path, **overrides):
    spec_path, spec = micro_spec(tmp_path, **overrides)
    run_dir = tmp_path / f"run-{spec['name']}"
    rc = main(["train", "--spec", str(spec_path), "--out", str(run_dir), "--quiet"])
    assert rc == 0
    return run_dir, spec


# ------------------------------------------------------------------- defaults


def test_default_lambda_grid_and_collapse_flag():
    assert LAMBDA_GRID == (0.0, 0.001, 0.005, 0.01, 0.05, 0.1, 0.5)
    assert DEGRADED_ALPHA == 0.05


# ------------------------------------------------------------------- data


def test_data_synthetic_writes_both_splits(tmp_path, capsys):
    out = tmp_path / "ds"
    rc = main(["data", "--task", "sort", "--n", "40", "--n-test", "10",
               "--length", "3", "--out", str(out)])
    assert rc == 0
    assert (out / "train.bin").exists() and (out / "heldout.bin").exists()
    said = capsys.readouterr().out
    assert "40 train rows" in said and "vocab 35" in said


def test_data_corpus_reports_vocab(tmp_path, capsys):
    corpus = tmp_path / "corpus.txt"
    corpus.write_text("hello depth routing\n" * 50)
    out = tmp_path / "corp"
    rc = main(["data", "--corpus", str(corpus), "--out", str(out)])
    assert rc == 0
    assert (out / "corpus.json").exists()
    assert "vocab" in capsys.readouterr().out


# ------------------------------------------------------------------- train/eval


def test_train_writes_run_and_serialises_spec(tmp_path, capsys):
    run_dir, spec = train_micro(tmp_path)
    for name in ("config.json", "records.csv", "checkpoint_final.bin",
                 "trace_final.csv", "summary.json"):
        assert (run_dir / name).exists(), name
    stored = json.loads((run_dir / "config.json").read_text())
    assert stored["experiment"] == spec  # verbatim, nothing added or dropped
    said = capsys.readouterr().out
    assert "alpha" in said and "accuracy" in said


def test_eval_prints_one_line(tmp_path, capsys):
    run_dir, _ = train_micro(tmp_path)
    capsys.readouterr()
    rc = main(["eval", "--run", str(run_dir), "--split", "val"])
    assert rc == 0
    said = capsys.readouterr().out.strip()
    assert said.count("\n") == 0
    for token in ("loss", "bpc", "alpha", "accuracy"):
        assert token in said


def test_eval_matches_training_summary(tmp_path, capsys):
    run_dir, _ = train_micro(tmp_path)
    summary = json.loads((run_dir / "summary.json").read_text())
    capsys.readouterr()
    # batch 8 matches the batch used for the in-training evaluation, so the
    # chunked accumulation order and therefore the printed loss are identical
    assert main(["eval", "--run", str(run_dir), "--split", "val", "--batch", "8"]) == 0
    said = capsys.readouterr().out
    assert f"{summary['final_val_loss_nats']:.6f}" in said


def test_train_preset_requires_corpus_for_lm(tmp_path, capsys):
    rc = main(["train", "--preset", "char-tsa-desk", "--out", str(tmp_path / "x")])
    assert rc == 1
    assert "corpus" in capsys.readouterr().err.lower()


def test_train_run_root_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("DEPTHGATE_RUN_ROOT", str(tmp_path / "root"))
    spec_path, spec = micro_spec(tmp_path)
    rc = main(["train", "--spec", str(spec_path), "--quiet"])
    assert rc == 0
    assert (tmp_path / "root" / spec["name"] / "summary.json").exists()


def test_train_override_flags(tmp_path):
    spec_path, _ = micro_spec(tmp_path)
    run_dir = tmp_path / "run"
    rc = main(["train", "--spec", str(spec_path), "--out", str(run_dir),
               "--steps", "6", "--eval-interval", "3", "--seed", "9", "--quiet"])
    assert rc == 0
    stored = json.loads((run_dir / "config.json").read_text())
    assert stored["experiment"]["steps"] == 6
    assert stored["experiment"]["seed"] == 9


# ------------------------------------------------------------------- sweeps


def test_sweep_lambda_table_shape(tmp_path, capsys):
    spec_path, _ = micro_spec(tmp_path)
    out = tmp_path / "sweep"
    rc = main(["sweep-lambda", "--spec", str(spec_path),
               "--lambdas", "0.05,0.001", "--out", str(out), "--quiet"])
    assert rc == 0
    with open(out / "lambda_sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == LAMBDA_SWEEP_COLUMNS
    # baseline row first, then ascending lambda
    assert rows[0]["lambda"] == "" and rows[0]["note"] == "baseline"
    assert [r["lambda"] for r in rows[1:]] == ["0.001", "0.05"]
    assert (out / "pareto.svg").exists()
    assert (out / "baseline" / "summary.json").exists()
    assert (out / "lambda-0.05" / "summary.json").exists()


def test_sweep_lambda_needs_gated_spec(tmp_path, capsys):
    spec_path, _ = micro_spec(tmp_path, name="plain", mode="baseline",
                              lambda_depth=0.0)
    rc = main(["sweep-lambda", "--spec", str(spec_path), "--lambdas", "0.001",
               "--out", str(tmp_path / "s"), "--quiet"])
    assert rc == 1
    assert "gated" in capsys.readouterr().err


def test_sweep_ee_outputs(tmp_path, capsys):
    run_dir, _ = train_micro(tmp_path, name="ee", mode="early_exit",
                             lambda_depth=0.0)
    capsys.readouterr()
    rc = main(["sweep-ee", "--run", str(run_dir), "--thresholds", "1.5,0.5",
               "--target-alpha", "0.7", "--batch", "8"])
    assert rc == 0
    assert (run_dir / "ee_sweep.csv").exists()
    assert (run_dir / "ee_sweep.svg").exists()
    said = capsys.readouterr().out
    assert "matched" in said


def test_sweep_ee_rejects_gated_run(tmp_path, capsys):
    run_dir, _ = train_micro(tmp_path)
    rc = main(["sweep-ee", "--run", str(run_dir), "--thresholds", "1.5"])
    assert rc == 1
    assert "early_exit" in capsys.readouterr().err


# ------------------------------------------------------------------- bench/plot


def test_bench_writes_table_and_chart(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    rc = main(["bench", "--d", "16", "--layers", "2", "--heads", "2",
               "--d-ff", "32", "--seq", "8", "--context", "8",
               "--batches", "2", "--alphas", "0.5,1.0",
               "--warmup", "0", "--timed", "2", "--out", str(out)])
    assert rc == 0
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert sorted(float(r["alpha"]) for r in rows) == [0.5, 1.0]
    assert out.with_suffix(".svg").exists()


def test_plot_from_run_artifacts(tmp_path):
    run_dir, _ = train_micro(tmp_path)
    charts = tmp_path / "charts"
    rc = main(["plot", "--records", str(run_dir / "records.csv"),
               "--trace", str(run_dir / "trace_final.csv"),
               "--out-dir", str(charts)])
    assert rc == 0
    assert (charts / "loss.svg").exists()
    assert (charts / "heatmap.svg").exists()


def test_plot_nothing_given(tmp_path, capsys):
    rc = main(["plot", "--out-dir", str(tmp_path)])
    assert rc == 1
    assert "nothing to plot" in capsys.readouterr().err


def test_export_trace_round_trip(tmp_path, capsys):
    run_dir, _ = train_micro(tmp_path)
    out = tmp_path / "exported.csv"
    rc = main(["export-trace", "--run", str(run_dir), "--out", str(out)])
    assert rc == 0
    assert out.read_text() == (run_dir / "trace_final.csv").read_text()


def test_export_trace_missing_for_ungated_run(tmp_path, capsys):
    run_dir, _ = train_micro(tmp_path, name="plain", mode="baseline",
                             lambda_depth=0.0)
    rc = main(["export-trace", "--run", str(run_dir),
               "--out", str(tmp_path / "x.csv")])
    assert rc == 1
    assert "trace" in capsys.readouterr().err


# ------------------------------------------------------------------- errors


def test_missing_run_directory(tmp_path, capsys):
    rc = main(["eval", "--run", str(tmp_path / "ghost"), "--split", "val"])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_unknown_preset_is_an_argparse_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--preset", "not-a-preset"])
    assert exc.value.code == 2


def test_checkpoint_spec_mismatch(tmp_path, capsys):
    run_dir, _ = train_micro(tmp_path)
    stored = json.loads((run_dir / "config.json").read_text())
    stored["experiment"]["d"] = 32  # lie about the width
    (run_dir / "config.json").write_text(json.dumps(stored))
    rc = main(["eval", "--run", str(run_dir), "--split", "val"])
    assert rc == 1
    assert "different model config" in capsys.readouterr().err
