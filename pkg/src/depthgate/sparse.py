"""Inference without the tape: dense, soft-gated, and sparse forwards on raw
numpy arrays, plus the wall-clock benchmark harness.

The helpers mirror the taped forward operation for operation, so logits agree
with the training path up to BLAS reassociation. Sparse execution binarizes
the halting probabilities at 0.5: attention stays dense (halted tokens keep
serving as keys/values) with its residual update mask-gated, while the FFN
runs only on gathered active rows which are scattered back in place.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, causal_mask
from .routing import router_hidden  # noqa: F401  (re-exported for bench sizing)

F32 = np.float32
_LN_EPS = F32(1e-5)
_FILL = F32(-1e9)


def _ln(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    return (xc * inv) * g + b


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _attention(x, w, prefix, cfg: ModelConfig, mask):
    bsz, seq, d = x.shape
    nh, hd = cfg.n_heads, cfg.head_dim

    def heads(t):
        return t.reshape(bsz, seq, nh, hd).transpose(0, 2, 1, 3)

    q = heads(x @ w[f"{prefix}.wq"])
    k = heads(x @ w[f"{prefix}.wk"])
    v = heads(x @ w[f"{prefix}.wv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * F32(1.0 / np.sqrt(hd))
    probs = _softmax(np.where(mask, _FILL, scores))
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(bsz, seq, d)
    return ctx @ w[f"{prefix}.wo"]


def _ffn(rows, w, prefix):
    z = np.maximum(rows @ w[f"{prefix}.w1"] + w[f"{prefix}.b1"], 0)
    return z @ w[f"{prefix}.w2"] + w[f"{prefix}.b2"]


def _embed(tokens, w):
    return w["tok_emb"][tokens] + w["pos_emb"][np.arange(tokens.shape[1])]


def _head(h, w):
    return _ln(h, w["final_ln.g"], w["final_ln.b"]) @ w["tok_emb"].T


def _router_p(h, w, k):
    z = np.maximum(h @ w[f"router{k}.w1"] + w[f"router{k}.b1"], 0)
    logit = (z @ w[f"router{k}.w2"])[..., 0] + w[f"router{k}.b2"][0]
    out = np.empty_like(logit)
    pos = logit >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-logit[pos]))
    e = np.exp(logit[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def block_dense(h, w, i, cfg, mask):
    p = f"block{i}"
    h = h + _attention(_ln(h, w[f"{p}.ln1.g"], w[f"{p}.ln1.b"]), w, p, cfg, mask)
    h = h + _ffn(_ln(h, w[f"{p}.ln2.g"], w[f"{p}.ln2.b"]), w, p)
    return h


def dense_forward(tokens, w: dict[str, np.ndarray], cfg: ModelConfig) -> np.ndarray:
    """Plain full-depth forward; ignores routers if present."""
    tokens = np.asarray(tokens)
    mask = causal_mask(tokens.shape[1])
    h = _embed(tokens, w)
    for i in range(cfg.n_layers):
        h = block_dense(h, w, i, cfg, mask)
    return _head(h, w)


def soft_forward(tokens, w: dict[str, np.ndarray], cfg: ModelConfig,
                 gates: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Soft-gated forward matching the taped gated path; returns (logits, p)."""
    if cfg.mode != "tsa":
        raise ValueError("soft_forward needs a gated-mode config")
    tokens = np.asarray(tokens)
    bsz, seq = tokens.shape
    mask = causal_mask(seq)
    h = _embed(tokens, w)
    h = block_dense(h, w, 0, cfg, mask)
    ps = np.empty((cfg.n_layers - 1, bsz, seq), dtype=F32)
    for k in range(cfg.n_layers - 1):
        p = ps[k] = gates[k] if gates is not None else _router_p(h, w, k)
        keep = (1.0 - p)[..., None]
        b = f"block{k + 1}"
        h = h + keep * _attention(_ln(h, w[f"{b}.ln1.g"], w[f"{b}.ln1.b"]), w, b, cfg, mask)
        h = h + keep * _ffn(_ln(h, w[f"{b}.ln2.g"], w[f"{b}.ln2.b"]), w, b)
    return _head(h, w), ps


def forced_masks(n_decisions: int, bsz: int, seq: int, alpha: float,
                 seed: int = 0) -> np.ndarray:
    """Random halt masks hitting a target occupancy: each token is active at
    each decision with probability alpha, halted otherwise."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    rng = np.random.default_rng(seed)
    return rng.random(size=(n_decisions, bsz, seq)) >= alpha  # True = halted


@dataclass
class SparseResult:
    logits: np.ndarray
    halt_masks: np.ndarray  # (decisions, B, T) bool, True = halted
    alpha: float            # measured active fraction


def sparse_forward(tokens, w: dict[str, np.ndarray], cfg: ModelConfig,
                   gate_source: str = "learned",
                   halt_masks: np.ndarray | None = None) -> SparseResult:
    """Binary-gated execution. gate_source picks where halt masks come from:
    "learned" thresholds the routers at 0.5, "forced" uses the given masks."""
    if cfg.mode != "tsa":
        raise ValueError("sparse_forward needs a gated-mode config")
    if gate_source not in ("learned", "forced"):
        raise ValueError(f"gate_source must be learned|forced, got {gate_source!r}")
    if gate_source == "forced" and halt_masks is None:
        raise ValueError("forced gate_source needs halt_masks")
    tokens = np.asarray(tokens)
    bsz, seq = tokens.shape
    n_dec = cfg.n_layers - 1
    mask = causal_mask(seq)
    h = _embed(tokens, w)
    h = block_dense(h, w, 0, cfg, mask)
    d = h.shape[-1]
    masks_out = np.empty((n_dec, bsz, seq), dtype=bool)
    active_total = 0
    for k in range(n_dec):
        if gate_source == "learned":
            halted = _router_p(h, w, k) > 0.5
        else:
            halted = np.asarray(halt_masks[k], dtype=bool)
            if halted.shape != (bsz, seq):
                raise ValueError(f"halt mask {k} has shape {halted.shape}, want {(bsz, seq)}")
        masks_out[k] = halted
        active = ~halted
        active_total += int(active.sum())
        b = f"block{k + 1}"
        attn = _attention(_ln(h, w[f"{b}.ln1.g"], w[f"{b}.ln1.b"]), w, b, cfg, mask)
        h = h + attn * active[..., None]
        flat = h.reshape(bsz * seq, d)
        idx = np.flatnonzero(active.reshape(-1))  # ascending by construction
        if idx.size:
            rows = _ln(flat[idx], w[f"{b}.ln2.g"], w[f"{b}.ln2.b"])
            flat[idx] += _ffn(rows, w, b)
    logits = _head(h, w)
    alpha = active_total / (n_dec * bsz * seq)
    return SparseResult(logits=logits, halt_masks=masks_out, alpha=alpha)


def np_cross_entropy(logits, targets, mask=None) -> float:
    """Mean nats over (masked) positions; numpy-only, for inference eval."""
    x = np.asarray(logits)
    m = x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x - m).sum(axis=-1, keepdims=True)) + m
    picked = np.take_along_axis(x, np.asarray(targets)[..., None], axis=-1)
    nll = (lse - picked)[..., 0]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        n = int(mask.sum())
        if n == 0:
            raise ValueError("np_cross_entropy: mask selects no positions")
        return float((nll * mask).sum(dtype=np.float64) / n)
    return float(nll.mean(dtype=np.float64))


# ------------------------------------------------------------------- benchmarks


@dataclass
class BenchReport:
    kind: str               # dense | soft | sparse
    batch: int
    seq: int
    alpha: float | None     # forced target occupancy (sparse rows only)
    measured_alpha: float | None
    tlops_saved: float | None
    warmup: int
    timed: int
    mean_ms: float
    median_ms: float
    std_ms: float
    dense_mean_ms: float
    speedup: float | None   # dense mean / this mean
    backend: str = "numpy"
    clock_note: str = ""


def _time_grid(fns, warmup: int, timed: int) -> list[tuple[float, float, float, str]]:
    """Time several callables in interleaved rounds.

    Each round runs every callable once, so slow host drift (scheduler,
    thermal) spreads evenly across all of them instead of offsetting whole
    configs that happen to be timed later.
    """
    if timed < 2:
        raise ValueError("need at least two timed passes")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    for fn in fns:
        for _ in range(warmup):
            fn()
    samples = np.empty((len(fns), timed), dtype=np.float64)
    for i in range(timed):
        for j, fn in enumerate(fns):
            t0 = time.perf_counter()
            fn()
            samples[j, i] = time.perf_counter() - t0
    res_ms = time.get_clock_info("perf_counter").resolution * 1000.0
    stats = []
    for j in range(len(fns)):
        ms = samples[j] * 1000.0
        note = ""
        if float(ms.mean()) < 100.0 * res_ms:
            note = f"mean within 100x clock resolution ({res_ms:.6f} ms)"
        stats.append((float(ms.mean()), float(np.median(ms)), float(ms.std()), note))
    return stats


def _time_loop(fn, warmup: int, timed: int) -> tuple[float, float, float, str]:
    return _time_grid([fn], warmup, timed)[0]


BENCH_ALPHA_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.726, 0.8, 0.833, 0.9, 1.0)
BENCH_BATCH_GRID = (1, 8, 32, 64, 128)


def run_bench(cfg: ModelConfig, w: dict[str, np.ndarray], seq: int,
              batch_grid=BENCH_BATCH_GRID, alpha_grid=BENCH_ALPHA_GRID,
              warmup: int = 30, timed: int = 200, seed: int = 0,
              include_soft: bool = True, quiet: bool = True) -> list[BenchReport]:
    """Forward-pass wall-clock comparison at forced occupancies.

    Each alpha gets Bernoulli halt masks drawn once (fixed seed) and reused
    across passes, so all timing variance is the host's, not the workload's.
    Within a batch size every condition (dense, soft, each alpha) is timed in
    interleaved rounds; see _time_grid.
    """
    if cfg.mode != "tsa":
        raise ValueError("run_bench needs a gated-mode config")
    if seq > cfg.context:
        raise ValueError(f"seq {seq} exceeds context {cfg.context}")
    rng = np.random.default_rng(seed)
    from .metrics import tlops_saved as _saved
    reports: list[BenchReport] = []
    n_dec = cfg.n_layers - 1
    for batch in batch_grid:
        tokens = rng.integers(0, cfg.vocab, size=(batch, seq))
        fns = [lambda: dense_forward(tokens, w, cfg)]
        if include_soft:
            fns.append(lambda: soft_forward(tokens, w, cfg))
        measured = []
        for alpha in alpha_grid:
            masks = forced_masks(n_dec, batch, seq, alpha, seed=seed + int(alpha * 1000))
            out = sparse_forward(tokens, w, cfg, gate_source="forced", halt_masks=masks)
            measured.append(out.alpha)
            fns.append(lambda masks=masks: sparse_forward(tokens, w, cfg,
                                                          gate_source="forced",
                                                          halt_masks=masks))
        stats = _time_grid(fns, warmup, timed)
        dense_mean = stats[0][0]
        mean, med, std, note = stats[0]
        reports.append(BenchReport("dense", batch, seq, None, None, None, warmup, timed,
                                   mean, med, std, dense_mean, None, clock_note=note))
        if not quiet:
            print(f"batch {batch}: dense {mean:.3f} ms", flush=True)
        if include_soft:
            mean, med, std, note = stats[1]
            reports.append(BenchReport("soft", batch, seq, None, None, None, warmup, timed,
                                       mean, med, std, dense_mean, dense_mean / mean,
                                       clock_note=note))
            if not quiet:
                print(f"batch {batch}: soft  {mean:.3f} ms", flush=True)
        base = 2 if include_soft else 1
        for k, alpha in enumerate(alpha_grid):
            mean, med, std, note = stats[base + k]
            reports.append(BenchReport("sparse", batch, seq, float(alpha), measured[k],
                                       _saved(float(alpha), cfg.n_layers), warmup, timed,
                                       mean, med, std, dense_mean, dense_mean / mean,
                                       clock_note=note))
            if not quiet:
                print(f"batch {batch}: sparse alpha={alpha:g} {mean:.3f} ms"
                      f" (x{dense_mean / mean:.2f})", flush=True)
    return reports


BENCH_COLUMNS = ["alpha", "tlops_saved", "dense_ms", "sparse_ms", "speedup", "batch", "seq"]


def write_bench_csv(path, reports: list[BenchReport]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        wcsv = csv.writer(fh)
        wcsv.writerow(BENCH_COLUMNS)
        for r in reports:
            if r.kind != "sparse":
                continue
            wcsv.writerow([f"{r.alpha:g}", f"{r.tlops_saved:.6f}", f"{r.dense_mean_ms:.4f}",
                           f"{r.mean_ms:.4f}", f"{r.speedup:.4f}", r.batch, r.seq])


def read_bench_csv(path) -> list[dict]:
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} holds no benchmark rows")
    missing = [c for c in BENCH_COLUMNS if c not in rows[0]]
    if missing:
        raise ValueError(f"benchmark csv missing columns: {missing}")
    return [{k: (v if k in ("batch", "seq") else float(v)) for k, v in row.items()}
            for row in rows]
