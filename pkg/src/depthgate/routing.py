"""Per-token routers and the depth penalty.

One tiny MLP sits after each block except the last and reads the post-block,
post-residual hidden state (no extra norm). Its sigmoid output is a halting
probability per token; downstream blocks scale their residual updates by
(1 - p). Everything stays soft and differentiable end to end: the task loss
and the depth penalty both reach the routers through the same gate, with no
straight-through tricks or detached branches.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, matmul, mean, relu, reshape, scale, sigmoid


def router_hidden(d: int) -> int:
    """Router hidden width: a quarter of the model width, floored at 16."""
    return max(16, d // 4)


def router_param_count(d: int) -> int:
    h = router_hidden(d)
    return d * h + h + h + 1


def router_forward(h: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Halting probability per token, shape (B, T), values in (0, 1)."""
    z = relu(matmul(h, w1) + b1)
    logit = matmul(z, w2) + b2
    return sigmoid(reshape(logit, logit.shape[:-1]))


def gated_update(h: Tensor, block, p: Tensor):
    """Run one gated block: `block` is a callable (h, gate) -> (h', deltas)."""
    return block(h, gate=p)


@dataclass
class RoutingTrace:
    """Halting probabilities for every routing decision of one forward pass.

    `gates[k]` is the (B, T) output of router k, still attached to the tape
    during training so the depth penalty can flow back through it.
    """

    gates: list[Tensor] = field(default_factory=list)

    def append(self, p: Tensor) -> None:
        self.gates.append(p)

    def __len__(self):
        return len(self.gates)

    def values(self) -> np.ndarray:
        """Detached stack of shape (decisions, B, T)."""
        return np.stack([p.data for p in self.gates])


def depth_loss(trace: RoutingTrace, lam: float) -> Tensor:
    """Penalty lam * mean over decisions of mean(1 - p).

    Pushing it down raises p, i.e. encourages tokens to halt earlier. At
    lam = 0 the term vanishes but gates still receive task-loss gradient.
    """
    if lam < 0:
        raise ValueError(f"depth penalty weight must be >= 0, got {lam}")
    if len(trace) == 0:
        raise ValueError("depth_loss needs at least one routing decision")
    if lam == 0:
        return Tensor(0.0)
    total = None
    for p in trace.gates:
        term = mean(1.0 - p)
        total = term if total is None else total + term
    return scale(total, lam / len(trace))


def write_trace_csv(path, trace_values: np.ndarray, tokens: np.ndarray) -> None:
    """Dump routing decisions as rows of (layer, batch_index, position, token_id, p).

    `layer` is the routing decision index: decision k gates block k+1
    (block 0, the stem, is never gated).
    """
    n_dec, bsz, seq = trace_values.shape
    if tokens.shape != (bsz, seq):
        raise ValueError(f"tokens shape {tokens.shape} does not match trace {(bsz, seq)}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "batch_index", "position", "token_id", "p"])
        for k in range(n_dec):
            for b in range(bsz):
                for t in range(seq):
                    w.writerow([k, b, t, int(tokens[b, t]), f"{trace_values[k, b, t]:.6f}"])


def read_trace_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of write_trace_csv; returns (trace (decisions,B,T), tokens (B,T))."""
    rows = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:5] != ["layer", "batch_index", "position", "token_id", "p"]:
            raise ValueError(f"unexpected trace header: {header}")
        for layer, b, t, tok, p in r:
            rows.append((int(layer), int(b), int(t), int(tok), float(p)))
    if not rows:
        raise ValueError("trace file has no rows")
    n_dec = max(r[0] for r in rows) + 1
    bsz = max(r[1] for r in rows) + 1
    seq = max(r[2] for r in rows) + 1
    trace = np.zeros((n_dec, bsz, seq), dtype=np.float32)
    tokens = np.zeros((bsz, seq), dtype=np.int64)
    for layer, b, t, tok, p in rows:
        trace[layer, b, t] = p
        tokens[b, t] = tok
    return trace, tokens
