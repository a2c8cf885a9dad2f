"""Command-line entry point.

One command is one process: data preparation, training, evaluation, the
regularisation and early-exit sweeps, the wall-clock benchmark, and chart
emission are all subcommands of a single executable. Library modules never
look at flags or the environment; everything they need arrives as arguments
from here.

The run-root for new run directories is `runs/` unless DEPTHGATE_RUN_ROOT
says otherwise.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import data as dd
from .early_exit import (
    EXIT_THRESHOLD_GRID,
    threshold_sweep,
    write_ee_csv,
)
from .metrics import tlops_saved
from .model import ModelConfig, init_weights, load_checkpoint, weights_to_arrays
from .plots import (
    PlotError,
    plot_ee_tradeoff,
    plot_heatmap,
    plot_loss_curves,
    plot_pareto,
    plot_speedup,
)
from .presets import ExperimentSpec, get_preset, preset_names
from .sparse import (
    BENCH_ALPHA_GRID,
    BENCH_BATCH_GRID,
    run_bench,
    write_bench_csv,
)
from .tensor import NumericFault, ShapeMismatch, TapeError
from .training import LmTask, SyntheticTask, TrainingError, evaluate, train

LAMBDA_GRID = (0.0, 0.001, 0.005, 0.01, 0.05, 0.1, 0.5)
LAMBDA_SWEEP_COLUMNS = ["lambda", "val_loss", "bpc", "alpha", "tlops_saved", "note"]
DEGRADED_ALPHA = 0.05


def _run_root() -> Path:
    return Path(os.environ.get("DEPTHGATE_RUN_ROOT", "runs"))


def _floats(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise ValueError(f"expected a comma-separated number list, got {text!r}")


def _ints(text: str) -> list[int]:
    return [int(round(x)) for x in _floats(text)]


# ----------------------------------------------------------------- task wiring


def _load_spec(args) -> ExperimentSpec:
    if getattr(args, "spec", None):
        spec = ExperimentSpec.from_json(args.spec)
    else:
        spec = get_preset(args.preset)
    for field in ("steps", "batch", "seed", "eval_interval"):
        value = getattr(args, field, None)
        if value is not None:
            setattr(spec, field, value)
    if getattr(args, "lambda_depth", None) is not None:
        spec.lambda_depth = args.lambda_depth
    return spec


def _build_task(spec: ExperimentSpec, corpus_path: str | None):
    if spec.is_lm:
        if not corpus_path:
            raise ValueError(f"experiment {spec.name!r} needs --corpus FILE")
        path = Path(corpus_path)
        if path.is_dir():
            corpus = dd.load_corpus_dir(path)
        else:
            corpus = dd.load_corpus(path, limit_bytes=spec.limit_bytes or None)
        task = LmTask(corpus, seq=spec.context)
        return task, spec.model_config(vocab=task.vocab)
    train_ds, held_ds = dd.gen_split_pair(spec.task, spec.n_train, spec.n_test,
                                          length=spec.length, seed=spec.seed)
    task = SyntheticTask(train_ds, held_ds)
    return task, spec.model_config()


def _train_one(spec: ExperimentSpec, corpus: str | None, run_dir: Path,
               quiet: bool) -> Path:
    task, model_cfg = _build_task(spec, corpus)
    payload = {"experiment": spec.to_dict(), "model": model_cfg.to_dict(),
               "train": spec.train_config().to_dict()}
    return train(model_cfg, spec.train_config(), task, run_dir,
                 experiment=payload, quiet=quiet)


def _reload_run(run_dir: Path, corpus: str | None):
    cfg_path = Path(run_dir) / "config.json"
    if not cfg_path.exists():
        raise FileNotFoundError(f"{run_dir} has no config.json; not a run directory")
    payload = json.loads(cfg_path.read_text())
    if "experiment" not in payload:
        raise ValueError(f"{cfg_path} lacks the experiment spec; re-train via the cli")
    spec = ExperimentSpec.from_dict(payload["experiment"])
    task, model_cfg = _build_task(spec, corpus)
    ckpt = Path(run_dir) / "checkpoint_final.bin"
    if not ckpt.exists():
        raise FileNotFoundError(f"{run_dir} has no checkpoint_final.bin")
    saved_cfg, weights = load_checkpoint(ckpt)
    if saved_cfg.to_dict() != model_cfg.to_dict():
        raise ValueError(f"{ckpt} was trained under a different model config"
                         " than the stored experiment spec rebuilds")
    return spec, task, saved_cfg, weights


# ----------------------------------------------------------------- subcommands


def cmd_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.corpus:
        corpus = dd.load_corpus(args.corpus, limit_bytes=args.limit_bytes or None)
        dd.save_corpus_dir(out, corpus)
        n = corpus.train_ids.size + corpus.val_ids.size + corpus.test_ids.size
        print(f"corpus: {n} characters, vocab {corpus.vocab.size}, splits"
              f" {corpus.train_ids.size}/{corpus.val_ids.size}/{corpus.test_ids.size}"
              f" -> {out}")
        return 0
    train_ds, held_ds = dd.gen_split_pair(args.task, args.n, args.n_test,
                                          length=args.length, seed=args.seed)
    dd.save_dataset(out / "train.bin", train_ds)
    dd.save_dataset(out / "heldout.bin", held_ds)
    print(f"{args.task}: {train_ds.n} train rows, {held_ds.n} held-out rows,"
          f" vocab {dd.SYNTH_VOCAB} -> {out}")
    return 0


def cmd_train(args) -> int:
    spec = _load_spec(args)
    run_dir = Path(args.out) if args.out else _run_root() / spec.name
    run = _train_one(spec, args.corpus, run_dir, args.quiet)
    summary = json.loads((run / "summary.json").read_text())
    line = (f"{spec.name}: {summary['steps']} steps,"
            f" val loss {summary['final_val_loss_nats']:.4f} nats")
    if summary.get("final_val_alpha") is not None:
        line += f", alpha {summary['final_val_alpha']:.3f}"
    if summary.get("final_val_accuracy") is not None:
        line += f", accuracy {summary['final_val_accuracy']:.4f}"
    print(line + f" -> {run}")
    return 0


def cmd_eval(args) -> int:
    spec, task, model_cfg, weights = _reload_run(Path(args.run), args.corpus)
    result = evaluate(weights, model_cfg, task, args.split, args.batch)
    parts = [f"split {args.split}", f"loss {result.loss_nats:.6f} nats",
             f"bpc {result.bpc:.6f}"]
    if result.alpha is not None:
        parts.append(f"alpha {result.alpha:.4f}")
        parts.append(f"tlops_saved {tlops_saved(result.alpha, model_cfg.n_layers):.4f}")
    if result.accuracy is not None:
        parts.append(f"accuracy {result.accuracy:.4f}")
    print(f"{spec.name}: " + ", ".join(parts))
    return 0


def cmd_sweep_lambda(args) -> int:
    spec = _load_spec(args)
    if spec.mode != "tsa":
        raise ValueError("sweep-lambda needs a gated preset (mode tsa)")
    out = Path(args.out) if args.out else _run_root() / f"{spec.name}-lambda-sweep"
    out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []

    base_spec = ExperimentSpec.from_dict({**spec.to_dict(), "mode": "baseline",
                                          "lambda_depth": 0.0,
                                          "name": f"{spec.name}-ungated"})
    run = _train_one(base_spec, args.corpus, out / "baseline", quiet=args.quiet)
    summary = json.loads((run / "summary.json").read_text())
    rows.append({"lambda": "", "val_loss": summary["final_val_loss_nats"],
                 "bpc": summary["final_val_bpc"], "alpha": "", "tlops_saved": "",
                 "note": "baseline"})
    print(f"baseline: val loss {summary['final_val_loss_nats']:.4f} nats")

    for lam in sorted(args.lambdas):
        sub = ExperimentSpec.from_dict({**spec.to_dict(), "lambda_depth": lam,
                                        "name": f"{spec.name}-lambda{lam:g}"})
        run = _train_one(sub, args.corpus, out / f"lambda-{lam:g}", quiet=args.quiet)
        summary = json.loads((run / "summary.json").read_text())
        alpha = summary["final_val_alpha"]
        note = "degraded" if alpha < DEGRADED_ALPHA else ""
        rows.append({"lambda": f"{lam:g}", "val_loss": summary["final_val_loss_nats"],
                     "bpc": summary["final_val_bpc"], "alpha": f"{alpha:.6f}",
                     "tlops_saved": f"{tlops_saved(alpha, spec.n_layers):.6f}",
                     "note": note})
        flag = f" [{note}]" if note else ""
        print(f"lambda {lam:g}: val loss {summary['final_val_loss_nats']:.4f} nats,"
              f" alpha {alpha:.3f}{flag}")

    csv_path = out / "lambda_sweep.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LAMBDA_SWEEP_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    chart = plot_pareto(csv_path, out / "pareto.svg")
    print(f"sweep table -> {csv_path}\nchart -> {chart}")
    return 0


def cmd_sweep_ee(args) -> int:
    spec, task, model_cfg, weights = _reload_run(Path(args.run), args.corpus)
    if model_cfg.mode != "early_exit":
        raise ValueError(f"sweep-ee needs an early_exit run, got mode {model_cfg.mode!r}")
    arrays = weights_to_arrays(weights)
    rows, matched = threshold_sweep(arrays, model_cfg, task,
                                    thresholds=tuple(args.thresholds),
                                    target_alpha=args.target_alpha,
                                    batch=args.batch, split=args.split)
    out = Path(args.out) if args.out else Path(args.run) / "ee_sweep.csv"
    write_ee_csv(out, rows)
    for i, row in enumerate(rows):
        mark = "  <- matched" if matched == i else ""
        print(f"threshold {row.threshold:g}: loss {row.val_loss:.4f} nats,"
              f" alpha {row.alpha:.3f}, saved {row.tlops_saved:.1%}{mark}")
    chart = plot_ee_tradeoff(out, out.with_suffix(".svg"))
    print(f"sweep table -> {out}\nchart -> {chart}")
    return 0


def cmd_bench(args) -> int:
    if args.run:
        _spec, _task, model_cfg, weights = _reload_run(Path(args.run), args.corpus)
        if model_cfg.mode != "tsa":
            raise ValueError("bench needs a gated checkpoint (mode tsa)")
        arrays = weights_to_arrays(weights)
    else:
        model_cfg = ModelConfig(d=args.d, n_layers=args.layers, n_heads=args.heads,
                                d_ff=args.d_ff, vocab=args.vocab,
                                context=max(args.seq, args.context), mode="tsa",
                                seed=args.seed)
        arrays = weights_to_arrays(init_weights(model_cfg))
    reports = run_bench(model_cfg, arrays, seq=args.seq,
                        batch_grid=tuple(args.batches),
                        alpha_grid=tuple(args.alphas),
                        warmup=args.warmup, timed=args.timed, seed=args.seed,
                        quiet=False)
    out = Path(args.out) if args.out else Path("bench.csv")
    write_bench_csv(out, reports)
    chart = plot_speedup(out, out.with_suffix(".svg"))
    noted = [r for r in reports if r.clock_note]
    if noted:
        print(f"note: {noted[0].clock_note}")
    print(f"benchmark table -> {out}\nchart -> {chart}")
    return 0


def cmd_plot(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    made = []
    if args.records:
        made.append(plot_loss_curves(args.records, out_dir / "loss.svg",
                                     labels=args.labels))
    if args.sweep:
        made.append(plot_pareto(args.sweep, out_dir / "pareto.svg"))
    if args.bench:
        made.append(plot_speedup(args.bench, out_dir / "speedup.svg"))
    if args.trace:
        made.append(plot_heatmap(args.trace, out_dir / "heatmap.svg",
                                 batch_index=args.batch_index))
    if not made:
        raise ValueError("nothing to plot; pass --records, --sweep, --bench,"
                         " or --trace")
    for path in made:
        print(f"chart -> {path}")
    return 0


def cmd_export_trace(args) -> int:
    src = Path(args.run) / "trace_final.csv"
    if not src.exists():
        raise FileNotFoundError(f"{args.run} has no trace_final.csv"
                                " (only gated runs export routing traces)")
    from .routing import read_trace_csv

    trace, _tokens = read_trace_csv(src)  # validates before copying
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(src, out)
    n_dec, bsz, seq = trace.shape
    print(f"trace: {n_dec} decisions x {bsz} sequences x {seq} positions,"
          f" mean active fraction {float(1.0 - trace.mean()):.3f} -> {out}")
    return 0


# ----------------------------------------------------------------- parser


def _add_spec_args(p: argparse.ArgumentParser, need_preset=True) -> None:
    group = p.add_mutually_exclusive_group(required=need_preset)
    group.add_argument("--preset", choices=preset_names(),
                       help="named experiment configuration")
    group.add_argument("--spec", help="path to an experiment spec JSON")
    p.add_argument("--corpus", help="character corpus file or prepared corpus"
                   " directory (lm experiments)")
    p.add_argument("--steps", type=int, help="override training steps")
    p.add_argument("--batch", type=int, help="override batch size")
    p.add_argument("--seed", type=int, help="override the experiment seed")
    p.add_argument("--eval-interval", dest="eval_interval", type=int,
                   help="override evaluation interval")
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="depthgate",
        description="Adaptive-depth transformer workbench: train, measure,"
                    " and benchmark per-token depth routing.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("data", help="generate synthetic datasets or prepare a corpus")
    p.add_argument("--task", choices=("copy", "sort"), default="copy")
    p.add_argument("--n", type=int, default=10000, help="training rows")
    p.add_argument("--n-test", dest="n_test", type=int, default=1000)
    p.add_argument("--length", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corpus", help="raw text/byte file; switches to corpus mode")
    p.add_argument("--limit-bytes", dest="limit_bytes", type=int, default=0,
                   help="read only the first N bytes of the corpus (0 = all)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_data)

    p = sub.add_parser("train", help="train one experiment into a run directory")
    _add_spec_args(p)
    p.add_argument("--lambda", dest="lambda_depth", type=float,
                   help="override the depth-penalty weight")
    p.add_argument("--out", help="run directory (default: run root / preset name)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="re-evaluate a finished run's checkpoint")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--corpus", help="corpus path for lm runs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-lambda",
                       help="train across depth-penalty weights, baseline first")
    _add_spec_args(p)
    p.add_argument("--lambdas", type=_floats, default=list(LAMBDA_GRID),
                   help="comma-separated penalty weights")
    p.add_argument("--out", help="sweep output directory")
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("sweep-ee",
                       help="sweep exit-confidence thresholds on a trained run")
    p.add_argument("--run", required=True, help="early_exit run directory")
    p.add_argument("--corpus", help="corpus path for lm runs")
    p.add_argument("--thresholds", type=_floats, default=list(EXIT_THRESHOLD_GRID))
    p.add_argument("--target-alpha", dest="target_alpha", type=float, default=0.726,
                   help="report the threshold whose occupancy lands nearest this")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.add_argument("--out", help="sweep csv path (default: RUN/ee_sweep.csv)")
    p.set_defaults(func=cmd_sweep_ee)

    p = sub.add_parser("bench", help="wall-clock dense vs sparse forward passes")
    p.add_argument("--run", help="gated run directory (default: random weights)")
    p.add_argument("--corpus", help="corpus path when --run is an lm run")
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--layers", type=int, default=6)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-ff", dest="d_ff", type=int, default=512)
    p.add_argument("--vocab", type=int, default=65)
    p.add_argument("--context", type=int, default=128)
    p.add_argument("--seq", type=int, default=64)
    p.add_argument("--batches", type=_ints, default=list(BENCH_BATCH_GRID))
    p.add_argument("--alphas", type=_floats, default=list(BENCH_ALPHA_GRID))
    p.add_argument("--warmup", type=int, default=30)
    p.add_argument("--timed", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="benchmark csv path (default: bench.csv)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plot", help="render charts from run artifacts")
    p.add_argument("--records", nargs="+", help="records.csv files to overlay")
    p.add_argument("--labels", nargs="+", help="legend labels for --records")
    p.add_argument("--sweep", help="lambda sweep csv")
    p.add_argument("--bench", help="benchmark csv")
    p.add_argument("--trace", help="routing trace csv")
    p.add_argument("--batch-index", dest="batch_index", type=int, default=0,
                   help="which traced sequence feeds the heatmap")
    p.add_argument("--out-dir", dest="out_dir", default=".")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("export-trace", help="copy a run's routing trace")
    p.add_argument("--run", required=True, help="gated run directory")
    p.add_argument("--out", required=True, help="destination csv path")
    p.set_defaults(func=cmd_export_trace)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError, TrainingError, NumericFault,
            TapeError, ShapeMismatch, PlotError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
