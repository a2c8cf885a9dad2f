"""AdamW training loop with compute accounting and run artifacts.

A run writes four files into its directory: config.json (the experiment as
given), records.csv (one evaluation row per eval interval), the final
checkpoint, and, for gated models, the routing trace of the first validation
batch. Decoupled weight decay touches matrix projection weights only;
embeddings, norms, and biases are exempt.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import data as dd
from .metrics import (
    ComputeLedger,
    RunRecord,
    active_fraction,
    bits_per_token,
    convergence_steps,
    write_records_csv,
)
from .model import ModelConfig, count_params, init_weights, model_forward, save_checkpoint
from .routing import depth_loss, write_trace_csv
from .tensor import NumericFault, Tape, Tensor, cross_entropy

SCHEDULES = ("constant", "cosine")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int
    batch: int
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    schedule: str = "constant"
    warmup: int = 100
    lr_floor_ratio: float = 0.1
    eval_interval: int = 100
    checkpoint_interval: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be positive")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.warmup < 0 or self.eval_interval < 1:
            raise ValueError("warmup must be >= 0 and eval_interval >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train-config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate for `step` (0-based): linear warmup to the peak, then
    either flat or a cosine glide down to lr_floor_ratio * peak at the
    final step."""
    if cfg.warmup > 0 and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    if cfg.schedule == "constant":
        return cfg.lr
    floor = cfg.lr * cfg.lr_floor_ratio
    last = cfg.steps - 1
    if last <= cfg.warmup:
        return cfg.lr
    progress = (step - cfg.warmup) / (last - cfg.warmup)
    progress = min(max(progress, 0.0), 1.0)
    return floor + 0.5 * (cfg.lr - floor) * (1.0 + np.cos(np.pi * progress))


def applies_weight_decay(name: str) -> bool:
    """Decay hits matrix projections (attention, FFN, router layers) only."""
    return name.split(".")[-1] in ("wq", "wk", "wv", "wo", "w1", "w2")


class AdamW:
    """Standard bias-corrected AdamW over a name -> Tensor dict, float32
    state, decay applied as a separate decoupled shrink after the update."""

    def __init__(self, weights: dict[str, Tensor], cfg: TrainConfig):
        self.weights = weights
        self.cfg = cfg
        self.m = {n: np.zeros_like(w.data) for n, w in weights.items()}
        self.v = {n: np.zeros_like(w.data) for n, w in weights.items()}
        self.t = 0

    def step(self, lr_t: float) -> None:
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        b1 = np.float32(cfg.beta1)
        b2 = np.float32(cfg.beta2)
        for name, p in self.weights.items():
            g = p.grad
            if g is None:
                raise TrainingError(f"missing gradient for parameter {name!r}")
            m, v = self.m[name], self.v[name]
            m *= b1
            m += np.float32(1.0 - cfg.beta1) * g
            v *= b2
            v += np.float32(1.0 - cfg.beta2) * (g * g)
            mhat = m / np.float32(bc1)
            vhat = v / np.float32(bc2)
            p.data -= np.float32(lr_t) * mhat / (np.sqrt(vhat) + np.float32(cfg.eps))
            if cfg.weight_decay and applies_weight_decay(name):
                p.data -= np.float32(lr_t * cfg.weight_decay) * p.data

    def zero_grads(self) -> None:
        for p in self.weights.values():
            p.grad = None


# ---------------------------------------------------------------- task adapters


class SyntheticTask:
    """Copy/sort training data: fixed example set, full held-out evaluation."""

    is_lm = False

    def __init__(self, train: dd.SyntheticDataset, heldout: dd.SyntheticDataset):
        if train.task != heldout.task or train.length != heldout.length:
            raise ValueError("train and held-out sets must share task and length")
        self.train = train
        self.heldout = heldout
        self.task = train.task

    @property
    def seq(self) -> int:
        return self.train.seq_len - 1  # model consumes sequences minus the last token

    @property
    def vocab(self) -> int:
        return dd.SYNTH_VOCAB

    def train_batch(self, batch: int, rng):
        return dd.sample_synthetic_batch(self.train, batch, rng)

    def eval_batches(self, split: str, batch: int):
        ds = {"train": self.train, "val": self.heldout, "test": self.heldout}[split]
        yield from dd.full_synthetic_eval_batches(ds, batch)


class LmTask:
    """Character-LM training data: random windows, non-overlapping eval."""

    is_lm = True

    def __init__(self, corpus: dd.CorpusData, seq: int):
        self.corpus = corpus
        self.seq = seq

    @property
    def vocab(self) -> int:
        return self.corpus.vocab.size

    def train_batch(self, batch: int, rng):
        inp, tgt = dd.sample_lm_batch(self.corpus.train_ids, batch, self.seq, rng)
        return inp, tgt, None

    def eval_batches(self, split: str, batch: int):
        for inp, tgt in dd.full_lm_eval_batches(self.corpus.split(split), batch, self.seq):
            yield inp, tgt, None


@dataclass
class EvalResult:
    loss_nats: float
    bpc: float
    alpha: float | None
    accuracy: float | None
    n_positions: int
    first_trace: np.ndarray | None = None
    first_tokens: np.ndarray | None = None


def evaluate(weights: dict[str, Tensor], model_cfg: ModelConfig, task, split: str,
             batch: int, keep_first_trace: bool = False) -> EvalResult:
    """Full-split evaluation; loss is the position-weighted mean in nats."""
    total_nll = 0.0
    total_n = 0
    hits = 0.0
    scored = 0
    alpha_num = 0.0
    alpha_den = 0
    first_trace = first_tokens = None
    for inp, tgt, mask in task.eval_batches(split, batch):
        logits, trace = model_forward(inp, weights, model_cfg)
        loss = cross_entropy(logits, tgt, mask)
        n = int(mask.sum()) if mask is not None else tgt.size
        total_nll += loss.item() * n
        total_n += n
        if not task.is_lm:
            pred = logits.data.argmax(axis=-1)
            hits += float((pred == tgt)[mask].sum())
            scored += n
        if trace is not None:
            vals = trace.values()
            alpha_num += active_fraction(vals) * vals[0].size
            alpha_den += vals[0].size
            if keep_first_trace and first_trace is None:
                first_trace = vals
                first_tokens = np.asarray(inp)
    if total_n == 0:
        raise ValueError(f"split {split!r} produced no evaluation positions")
    loss = total_nll / total_n
    return EvalResult(
        loss_nats=loss,
        bpc=bits_per_token(loss),
        alpha=(alpha_num / alpha_den) if alpha_den else None,
        accuracy=(hits / scored) if scored else None,
        n_positions=total_n,
        first_trace=first_trace,
        first_tokens=first_tokens,
    )


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, task, run_dir,
          experiment: dict | None = None, quiet: bool = False) -> Path:
    """Train from scratch and leave a complete run directory behind.

    Returns the run directory path. Raises NumericFault with the step number
    if the loss ever goes non-finite; nothing is retried or clipped.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config_payload = experiment if experiment is not None else {
        "model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
    }
    (run_dir / "config.json").write_text(json.dumps(config_payload, indent=2))

    weights = init_weights(model_cfg)
    opt = AdamW(weights, train_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    ledger = ComputeLedger()
    records: list[RunRecord] = []
    gated = model_cfg.mode == "tsa"

    step_time_acc = 0.0
    steps_since_eval = 0
    t_start = time.perf_counter()

    for step in range(train_cfg.steps):
        t0 = time.perf_counter()
        inp, tgt, mask = task.train_batch(train_cfg.batch, rng)
        opt.zero_grads()
        try:
            with Tape() as tape:
                trace = None
                if model_cfg.mode == "early_exit":
                    from .early_exit import ee_train_loss

                    loss, _ = ee_train_loss(inp, tgt, mask, weights, model_cfg)
                else:
                    logits, trace = model_forward(inp, weights, model_cfg)
                    loss = cross_entropy(logits, tgt, mask)
                    if gated:
                        loss = loss + depth_loss(trace, model_cfg.lambda_depth)
            tape.backward(loss)
        except NumericFault as e:
            raise NumericFault(f"training diverged at step {step}: {e}") from e
        opt.step(lr_at(step, train_cfg))

        alpha_step = active_fraction(trace) if gated else None
        ledger.add_step(train_cfg.batch, inp.shape[1], model_cfg.n_layers, alpha_step)
        step_time_acc += time.perf_counter() - t0
        steps_since_eval += 1

        is_last = step == train_cfg.steps - 1
        if (step + 1) % train_cfg.eval_interval == 0 or is_last:
            res = evaluate(weights, model_cfg, task, "val", train_cfg.batch,
                           keep_first_trace=gated and is_last)
            rec = RunRecord(
                step=step + 1, split="val", loss_nats=res.loss_nats, bpc=res.bpc,
                alpha=res.alpha, tlops_cumulative=ledger.total,
                ms_per_step=1000.0 * step_time_acc / steps_since_eval,
                lambda_depth=model_cfg.lambda_depth, mode=model_cfg.mode,
                seed=model_cfg.seed, accuracy=res.accuracy,
            )
            records.append(rec)
            write_records_csv(run_dir / "records.csv", records)
            if not quiet:
                alpha_s = f" alpha {res.alpha:.3f}" if res.alpha is not None else ""
                acc_s = f" acc {res.accuracy:.4f}" if res.accuracy is not None else ""
                print(f"step {step + 1}/{train_cfg.steps} val_loss {res.loss_nats:.4f}"
                      f" bpc {res.bpc:.4f}{alpha_s}{acc_s}", flush=True)
            step_time_acc = 0.0
            steps_since_eval = 0
            if is_last and res.first_trace is not None:
                write_trace_csv(run_dir / "trace_final.csv", res.first_trace, res.first_tokens)

        if train_cfg.checkpoint_interval and (step + 1) % train_cfg.checkpoint_interval == 0 \
                and not is_last:
            save_checkpoint(run_dir / f"checkpoint_step{step + 1}.bin", model_cfg, weights)

    save_checkpoint(run_dir / "checkpoint_final.bin", model_cfg, weights)
    final = records[-1]
    summary = {
        "params": count_params(weights),
        "steps": train_cfg.steps,
        "final_val_loss_nats": final.loss_nats,
        "final_val_bpc": final.bpc,
        "final_val_alpha": final.alpha,
        "final_val_accuracy": final.accuracy,
        "tlops_total": ledger.total,
        "wall_seconds": time.perf_counter() - t_start,
    }
    if task.is_lm:
        summary["bpc_convergence_steps"] = {
            str(k): v for k, v in convergence_steps(
                [(r.step, r.bpc) for r in records]).items()
        }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return run_dir
