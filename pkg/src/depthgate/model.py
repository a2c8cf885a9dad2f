"""Decoder-only pre-norm transformer with optional per-token depth gating.

Weights live in a flat name -> Tensor dict. Architecture conventions, chosen
once and relied on by the parameter-count tests: attention projections carry
no bias, FFN layers do, the logit head is the transposed token embedding
(tied, no bias), and positions use a learned embedding table. Residual-output
projections (attention out, FFN second layer) are initialised with std scaled
down by 1/sqrt(2 * n_layers).

Modes: "baseline" runs the plain block stack; "tsa" gates every block after
the first with a router probability; "early_exit" shares the baseline forward
here and differs only in training loss and inference (see early_exit.py).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import routing
from .tensor import (
    DTYPE,
    Tensor,
    embedding,
    layer_norm,
    masked_fill,
    matmul,
    relu,
    reshape,
    scale,
    softmax,
    transpose,
)

MODES = ("baseline", "tsa", "early_exit")

INIT_STD = 0.02
ROUTER_BIAS_INIT = -1.0


@dataclass
class ModelConfig:
    d: int
    n_layers: int
    n_heads: int
    d_ff: int
    vocab: int
    context: int
    mode: str = "baseline"
    lambda_depth: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.d <= 0 or self.d % self.n_heads != 0:
            raise ValueError(f"width {self.d} must be a positive multiple of heads {self.n_heads}")
        if self.n_layers < 1:
            raise ValueError("need at least one block")
        if self.mode == "tsa" and self.n_layers < 2:
            raise ValueError("gated mode needs at least two blocks (the stem is never gated)")
        if self.vocab < 2:
            raise ValueError("vocab must be at least 2")
        if self.context < 1 or self.d_ff < 1:
            raise ValueError("context and d_ff must be positive")
        if self.lambda_depth < 0:
            raise ValueError("lambda_depth must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    @property
    def n_decisions(self) -> int:
        return self.n_layers - 1 if self.mode == "tsa" else 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Parameter names and shapes, in deterministic build order.

    Router entries come last so a gated model shares its transformer init
    stream with the baseline of the same seed.
    """
    d, ff = config.d, config.d_ff
    shapes: dict[str, tuple] = {
        "tok_emb": (config.vocab, d),
        "pos_emb": (config.context, d),
    }
    for i in range(config.n_layers):
        p = f"block{i}"
        shapes[f"{p}.ln1.g"] = (d,)
        shapes[f"{p}.ln1.b"] = (d,)
        shapes[f"{p}.wq"] = (d, d)
        shapes[f"{p}.wk"] = (d, d)
        shapes[f"{p}.wv"] = (d, d)
        shapes[f"{p}.wo"] = (d, d)
        shapes[f"{p}.ln2.g"] = (d,)
        shapes[f"{p}.ln2.b"] = (d,)
        shapes[f"{p}.w1"] = (d, ff)
        shapes[f"{p}.b1"] = (ff,)
        shapes[f"{p}.w2"] = (ff, d)
        shapes[f"{p}.b2"] = (d,)
    shapes["final_ln.g"] = (d,)
    shapes["final_ln.b"] = (d,)
    if config.mode == "tsa":
        hr = routing.router_hidden(config.d)
        for k in range(config.n_layers - 1):
            p = f"router{k}"
            shapes[f"{p}.w1"] = (d, hr)
            shapes[f"{p}.b1"] = (hr,)
            shapes[f"{p}.w2"] = (hr, 1)
            shapes[f"{p}.b2"] = (1,)
    return shapes


def _init_std(name: str, config: ModelConfig) -> float:
    last = name.split(".")[-1]
    if last in ("wo", "w2") and name.startswith("block"):
        return INIT_STD / np.sqrt(2.0 * config.n_layers)
    return INIT_STD


def init_weights(config: ModelConfig, seed: int | None = None) -> dict[str, Tensor]:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    weights: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        last = name.split(".")[-1]
        if last in ("g",):
            data = np.ones(shape, dtype=DTYPE)
        elif last in ("b", "b1", "b2"):
            data = np.zeros(shape, dtype=DTYPE)
            if name.startswith("router") and last == "b2":
                data[:] = ROUTER_BIAS_INIT
        else:
            data = rng.normal(0.0, _init_std(name, config), size=shape).astype(DTYPE)
        weights[name] = Tensor(data, requires_grad=True)
    return weights


def count_params(weights: dict[str, Tensor]) -> int:
    return sum(int(w.size) for w in weights.values())


def causal_mask(seq_len: int) -> np.ndarray:
    """True above the diagonal: positions a query may not attend to."""
    return np.triu(np.ones((seq_len, seq_len), dtype=bool), k=1)


def attention(x: Tensor, weights: dict[str, Tensor], prefix: str,
              config: ModelConfig, mask: np.ndarray) -> Tensor:
    bsz, seq, d = x.shape
    hd, nh = config.head_dim, config.n_heads

    def heads(t):
        return transpose(reshape(t, (bsz, seq, nh, hd)), (0, 2, 1, 3))

    q = heads(matmul(x, weights[f"{prefix}.wq"]))
    k = heads(matmul(x, weights[f"{prefix}.wk"]))
    v = heads(matmul(x, weights[f"{prefix}.wv"]))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    probs = softmax(masked_fill(scores, mask))
    ctx = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), (bsz, seq, d))
    return matmul(ctx, weights[f"{prefix}.wo"])


def block_forward(h: Tensor, weights: dict[str, Tensor], index: int,
                  config: ModelConfig, mask: np.ndarray,
                  gate: Tensor | None = None) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    """One pre-norm block; sublayer deltas are computed sequentially, the FFN
    delta from the attention-updated state. With a gate, both residual adds
    are scaled per token by (1 - gate)."""
    p = f"block{index}"
    keep = None
    if gate is not None:
        keep = reshape(1.0 - gate, gate.shape + (1,))

    attn_delta = attention(layer_norm(h, weights[f"{p}.ln1.g"], weights[f"{p}.ln1.b"]),
                           weights, p, config, mask)
    h = h + (keep * attn_delta if keep is not None else attn_delta)

    z = layer_norm(h, weights[f"{p}.ln2.g"], weights[f"{p}.ln2.b"])
    z = relu(matmul(z, weights[f"{p}.w1"]) + weights[f"{p}.b1"])
    ffn_delta = matmul(z, weights[f"{p}.w2"]) + weights[f"{p}.b2"]
    h = h + (keep * ffn_delta if keep is not None else ffn_delta)
    return h, (attn_delta, ffn_delta)


def _coerce_forced_gate(forced, n_decisions: int, bsz: int, seq: int) -> list[Tensor]:
    if isinstance(forced, (int, float)):
        arr = np.full((n_decisions, bsz, seq), float(forced), dtype=DTYPE)
    else:
        arr = np.asarray(forced, dtype=DTYPE)
        if arr.shape == (bsz, seq):
            arr = np.broadcast_to(arr, (n_decisions, bsz, seq))
        if arr.shape != (n_decisions, bsz, seq):
            raise ValueError(f"forced gate shape {arr.shape} != {(n_decisions, bsz, seq)}")
    return [Tensor(arr[k]) for k in range(n_decisions)]


def model_forward(tokens: np.ndarray, weights: dict[str, Tensor], config: ModelConfig,
                  forced_gate=None) -> tuple[Tensor, routing.RoutingTrace | None]:
    """Logits (B, T, vocab) plus the routing trace in gated mode (else None).

    `forced_gate` overrides the routers in gated mode: a scalar, a (B, T)
    array, or one (B, T) array per decision. Used by the gate-identity tests
    and the forced-occupancy benchmarks.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be (batch, seq), got {tokens.shape}")
    bsz, seq = tokens.shape
    if seq > config.context:
        raise ValueError(f"sequence length {seq} exceeds context {config.context}")
    if forced_gate is not None and config.mode != "tsa":
        raise ValueError("forced_gate is only meaningful in gated mode")

    h = embedding(weights["tok_emb"], tokens) + embedding(weights["pos_emb"], np.arange(seq))
    mask = causal_mask(seq)

    trace = None
    if config.mode == "tsa":
        trace = routing.RoutingTrace()
        forced = None
        if forced_gate is not None:
            forced = _coerce_forced_gate(forced_gate, config.n_layers - 1, bsz, seq)
        h, _ = block_forward(h, weights, 0, config, mask)
        for k in range(config.n_layers - 1):
            if forced is not None:
                p = forced[k]
            else:
                r = f"router{k}"
                p = routing.router_forward(h, weights[f"{r}.w1"], weights[f"{r}.b1"],
                                           weights[f"{r}.w2"], weights[f"{r}.b2"])
            trace.append(p)
            h, _ = block_forward(h, weights, k + 1, config, mask, gate=p)
    else:
        for i in range(config.n_layers):
            h, _ = block_forward(h, weights, i, config, mask)

    h = layer_norm(h, weights["final_ln.g"], weights["final_ln.b"])
    logits = matmul(h, transpose(weights["tok_emb"], (1, 0)))
    return logits, trace


# ------------------------------------------------------------------ checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path, config: ModelConfig, weights: dict[str, Tensor]) -> None:
    """One JSON header line, then raw little-endian float32 parameter data
    concatenated in lexicographic name order. Bit-exact by construction."""
    names = sorted(weights)
    header = {
        "format": "depthgate-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "params": names,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n")
        for name in names:
            fh.write(np.ascontiguousarray(weights[name].data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, Tensor]]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != "depthgate-checkpoint":
            raise ValueError(f"{path} is not a checkpoint file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        config = ModelConfig.from_dict(header["config"])
        shapes = param_shapes(config)
        stored = header["params"]
        if sorted(shapes) != sorted(stored):
            raise ValueError("checkpoint parameter list does not match its config")
        weights: dict[str, Tensor] = {}
        for name in stored:
            shape = shapes[name]
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * n)
            if len(buf) != 4 * n:
                raise ValueError(f"checkpoint truncated while reading {name}")
            weights[name] = Tensor(np.frombuffer(buf, dtype="<f4", count=n).reshape(shape).copy(),
                                   requires_grad=True)
        if fh.read(1):
            raise ValueError("trailing bytes after last parameter")
    return config, weights


def weights_to_arrays(weights: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Plain ndarray view of the weights for the inference-only engines."""
    return {name: w.data for name, w in weights.items()}
