"""Occupancy, compute accounting, and run records.

The cost unit is the token-layer op: one token passing through one block.
A dense model spends B*T*n_layers of them per step. A gated model always
pays for the stem and then only the active fraction of each remaining slot,
so its per-step cost is B*T*(1 + (n_layers - 1) * alpha).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

LN2 = math.log(2.0)

RECORD_COLUMNS = [
    "step", "split", "loss_nats", "bpc", "alpha", "tlops_cumulative",
    "ms_per_step", "lambda", "mode", "seed", "accuracy",
]


def active_fraction(trace) -> float:
    """Mean over routing decisions of mean(1 - p): the soft occupancy alpha."""
    if hasattr(trace, "values"):
        trace = trace.values()
    arr = np.asarray(trace, dtype=np.float64)
    if arr.ndim < 1 or arr.size == 0:
        raise ValueError("active_fraction needs a non-empty trace")
    per_decision = 1.0 - arr.reshape(arr.shape[0], -1).mean(axis=1)
    return float(per_decision.mean())


def tlops_saved(alpha: float, n_layers: int) -> float:
    """Fraction of dense token-layer ops avoided at occupancy alpha."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if n_layers < 2:
        raise ValueError("savings are defined for at least two blocks")
    return 1.0 - (1.0 + (n_layers - 1) * alpha) / n_layers


def bits_per_token(loss_nats: float) -> float:
    """Convert a nats/token loss to bits/token (BPC for character models)."""
    if loss_nats < 0:
        raise ValueError(f"loss must be >= 0, got {loss_nats}")
    return loss_nats / LN2


def convergence_steps(history, thresholds=(2.5, 2.0, 1.8)) -> dict[float, int | None]:
    """First step at which BPC reaches each threshold, else None.

    `history` is an iterable of (step, bpc) pairs, assumed step-sorted.
    """
    out: dict[float, int | None] = {float(t): None for t in thresholds}
    for step, bpc in history:
        for t in out:
            if out[t] is None and bpc <= t:
                out[t] = int(step)
    return out


@dataclass
class ComputeLedger:
    """Running total of token-layer ops spent by training steps."""

    total: float = 0.0
    steps: int = 0

    def add_step(self, batch: int, seq: int, n_layers: int, alpha: float | None = None) -> float:
        if alpha is None:
            cost = batch * seq * n_layers
        else:
            if not 0.0 <= alpha <= 1.0:
                raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
            cost = batch * seq * (1.0 + (n_layers - 1) * alpha)
        self.total += cost
        self.steps += 1
        return cost


@dataclass
class RunRecord:
    """One evaluation row of a training run."""

    step: int
    split: str
    loss_nats: float
    bpc: float
    alpha: float | None
    tlops_cumulative: float
    ms_per_step: float
    lambda_depth: float
    mode: str
    seed: int
    accuracy: float | None = None

    def to_row(self) -> list[str]:
        def num(x, fmt="{:.6f}"):
            return "" if x is None else fmt.format(x)

        return [
            str(self.step), self.split, f"{self.loss_nats:.6f}", f"{self.bpc:.6f}",
            num(self.alpha), f"{self.tlops_cumulative:.1f}", f"{self.ms_per_step:.3f}",
            f"{self.lambda_depth:g}", self.mode, str(self.seed), num(self.accuracy),
        ]

    @classmethod
    def from_row(cls, row: list[str]) -> "RunRecord":
        return cls(
            step=int(row[0]), split=row[1], loss_nats=float(row[2]), bpc=float(row[3]),
            alpha=float(row[4]) if row[4] else None, tlops_cumulative=float(row[5]),
            ms_per_step=float(row[6]), lambda_depth=float(row[7]), mode=row[8],
            seed=int(row[9]), accuracy=float(row[10]) if len(row) > 10 and row[10] else None,
        )


def write_records_csv(path, records: list[RunRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow(r.to_row())


def read_records_csv(path) -> list[RunRecord]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[: len(RECORD_COLUMNS) - 1] != RECORD_COLUMNS[:-1]:
            raise ValueError(f"unexpected records header: {header}")
        return [RunRecord.from_row(row) for row in r if row]
