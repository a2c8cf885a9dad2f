"""Confidence-based early exit: the fixed-cost adaptive-depth baseline.

Training attaches the shared final norm + tied head after every block and
averages the cross-entropies uniformly, so no new parameters appear anywhere.
At inference a token freezes the first time its top softmax probability
clears the threshold after a non-final block; frozen states stay in place and
remain attendable by later tokens' attention. A threshold above 1 can never
fire, which makes the whole machinery collapse bit-exactly onto the plain
forward - the sanity anchor the tests lean on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import bits_per_token, tlops_saved
from .model import ModelConfig, causal_mask
from .sparse import _head, _ln, block_dense, np_cross_entropy
from .tensor import Tensor, cross_entropy, embedding, layer_norm, matmul, scale, transpose
from . import model as _model

EXIT_THRESHOLD_GRID = (0.99, 0.95, 0.90, 0.85, 0.80, 0.75, 0.70, 0.65, 0.60,
                       0.55, 0.50, 0.40, 0.30)


def ee_train_loss(inp, tgt, mask, weights, cfg: ModelConfig):
    """Mean of per-exit cross-entropies, one exit after every block.

    Returns (loss tensor, per-exit loss floats). All blocks always run during
    training; adaptivity only exists at inference time.
    """
    if cfg.mode != "early_exit":
        raise ValueError("ee_train_loss needs an early_exit-mode config")
    inp = np.asarray(inp)
    bsz, seq = inp.shape
    cmask = causal_mask(seq)
    h = embedding(weights["tok_emb"], inp) + embedding(weights["pos_emb"], np.arange(seq))
    per_exit = []
    total = None
    for i in range(cfg.n_layers):
        h, _ = _model.block_forward(h, weights, i, cfg, cmask)
        z = layer_norm(h, weights["final_ln.g"], weights["final_ln.b"])
        logits = matmul(z, transpose(weights["tok_emb"], (1, 0)))
        ce = cross_entropy(logits, tgt, mask)
        per_exit.append(ce.item())
        total = ce if total is None else total + ce
    return scale(total, 1.0 / cfg.n_layers), per_exit


@dataclass
class EEResult:
    logits: np.ndarray       # per-token logits taken at each token's exit
    exit_layers: np.ndarray  # (B, T) int in [1, n_layers]
    alpha: float             # mean occupancy of the post-stem block slots


def _max_softmax_prob(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return 1.0 / np.exp(z).sum(axis=-1)


def alpha_from_exit_layers(exit_layers: np.ndarray, n_layers: int) -> float:
    """Occupancy of the post-stem slots: slot j in [2, n_layers] is executed
    by a token exactly when its exit layer is >= j."""
    slots = np.arange(2, n_layers + 1)
    return float((np.asarray(exit_layers)[..., None] >= slots).mean())


def ee_infer(tokens, w: dict[str, np.ndarray], cfg: ModelConfig,
             threshold: float) -> EEResult:
    """Run the block stack with per-token freezing at `threshold`.

    Every block computes densely on the full batch; frozen tokens simply keep
    their old state (they still serve attention as keys/values), and their
    exit logits were fixed at freeze time.
    """
    tokens = np.asarray(tokens)
    bsz, seq = tokens.shape
    cmask = causal_mask(seq)
    h = w["tok_emb"][tokens] + w["pos_emb"][np.arange(seq)]
    active = np.ones((bsz, seq), dtype=bool)
    exit_layers = np.full((bsz, seq), cfg.n_layers, dtype=np.int64)
    logits_out = np.empty((bsz, seq, cfg.vocab), dtype=np.float32)
    for i in range(cfg.n_layers):
        h_new = block_dense(h, w, i, cfg, cmask)
        h = np.where(active[..., None], h_new, h)
        if i < cfg.n_layers - 1:
            ex = _head(h, w)
            conf = _max_softmax_prob(ex)
            newly = active & (conf > threshold)
            if newly.any():
                exit_layers[newly] = i + 1
                logits_out[newly] = ex[newly]
                active &= ~newly
    final = _head(h, w)
    logits_out[active] = final[active]
    # occupancy over the n_layers-1 post-stem slots; the stem is always paid
    alpha = alpha_from_exit_layers(exit_layers, cfg.n_layers)
    return EEResult(logits=logits_out, exit_layers=exit_layers, alpha=alpha)


def ee_eval(w: dict[str, np.ndarray], cfg: ModelConfig, task, split: str,
            threshold: float, batch: int) -> tuple[float, float]:
    """(loss nats, alpha) of early-exit inference over a full split."""
    total_nll = 0.0
    total_n = 0
    alpha_num = 0.0
    alpha_den = 0
    for inp, tgt, mask in task.eval_batches(split, batch):
        res = ee_infer(inp, w, cfg, threshold)
        n = int(np.asarray(mask).sum()) if mask is not None else np.asarray(tgt).size
        total_nll += np_cross_entropy(res.logits, tgt, mask) * n
        total_n += n
        alpha_num += res.alpha * res.exit_layers.size
        alpha_den += res.exit_layers.size
    if total_n == 0:
        raise ValueError(f"split {split!r} produced no evaluation positions")
    return total_nll / total_n, alpha_num / alpha_den


@dataclass
class SweepRow:
    threshold: float
    val_loss: float
    bpc: float
    alpha: float
    tlops_saved: float


def threshold_sweep(w: dict[str, np.ndarray], cfg: ModelConfig, task,
                    thresholds=EXIT_THRESHOLD_GRID, target_alpha: float | None = None,
                    batch: int = 32, split: str = "val") -> tuple[list[SweepRow], int | None]:
    """Early-exit quality/occupancy across thresholds, plus the index of the
    row whose alpha lands closest to `target_alpha` (None when no target)."""
    rows = []
    for th in thresholds:
        loss, alpha = ee_eval(w, cfg, task, split, th, batch)
        rows.append(SweepRow(threshold=float(th), val_loss=loss, bpc=bits_per_token(loss),
                             alpha=alpha, tlops_saved=tlops_saved(alpha, cfg.n_layers)))
    matched = None
    if target_alpha is not None:
        matched = int(np.argmin([abs(r.alpha - target_alpha) for r in rows]))
    return rows, matched


EE_SWEEP_COLUMNS = ["threshold", "val_loss", "bpc", "alpha", "tlops_saved"]


def write_ee_csv(path, rows: list[SweepRow]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EE_SWEEP_COLUMNS)
        for r in rows:
            w.writerow([f"{r.threshold:g}", f"{r.val_loss:.6f}", f"{r.bpc:.6f}",
                        f"{r.alpha:.6f}", f"{r.tlops_saved:.6f}"])


def read_ee_csv(path) -> list[SweepRow]:
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} holds no sweep rows")
    missing = [c for c in EE_SWEEP_COLUMNS if c not in rows[0]]
    if missing:
        raise ValueError(f"sweep csv missing columns: {missing}")
    return [SweepRow(threshold=float(r["threshold"]), val_loss=float(r["val_loss"]),
                     bpc=float(r["bpc"]), alpha=float(r["alpha"]),
                     tlops_saved=float(r["tlops_saved"])) for r in rows]
