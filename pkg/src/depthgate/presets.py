"""Named experiment configurations.

An ExperimentSpec is the flat, serialisable description of one run: task,
model dimensions, optimiser settings, and data source. Presets come in
pairs: a full-size configuration and a "-desk" variant small enough for
continuous testing. The experiment JSON is written verbatim into every run
directory so a run is reproducible from its artifacts alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .data import SYNTH_VOCAB
from .model import MODES, ModelConfig
from .training import TrainConfig

TASKS = ("copy", "sort", "lm")


@dataclass
class ExperimentSpec:
    name: str
    task: str
    mode: str
    d: int
    n_layers: int
    n_heads: int
    d_ff: int
    context: int
    lambda_depth: float
    seed: int
    steps: int
    batch: int
    lr: float
    schedule: str
    warmup: int
    eval_interval: int
    n_train: int = 0
    n_test: int = 0
    length: int = 0
    limit_bytes: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.task in ("copy", "sort"):
            if self.n_train <= 0 or self.n_test <= 0 or self.length <= 0:
                raise ValueError("synthetic tasks need n_train, n_test, and length")
            needed = 2 * self.length + 2
            if self.context < needed:
                raise ValueError(f"context {self.context} cannot hold"
                                 f" length-{self.length} rows (need >= {needed})")
        if self.task == "lm" and self.limit_bytes < 0:
            raise ValueError("limit_bytes must be >= 0 (0 reads the whole file)")

    @property
    def is_lm(self) -> bool:
        return self.task == "lm"

    def model_config(self, vocab: int | None = None) -> ModelConfig:
        if vocab is None:
            if self.is_lm:
                raise ValueError("lm specs need the corpus vocabulary size")
            vocab = SYNTH_VOCAB
        return ModelConfig(d=self.d, n_layers=self.n_layers, n_heads=self.n_heads,
                           d_ff=self.d_ff, vocab=vocab, context=self.context,
                           mode=self.mode, lambda_depth=self.lambda_depth,
                           seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, batch=self.batch, lr=self.lr,
                           schedule=self.schedule, warmup=self.warmup,
                           eval_interval=self.eval_interval, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown experiment keys: {unknown}")
        missing = sorted(known - set(data))
        if missing:
            raise ValueError(f"missing experiment keys: {missing}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ExperimentSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _synthetic(name, task, mode, desk: bool) -> ExperimentSpec:
    return ExperimentSpec(
        name=name, task=task, mode=mode,
        d=128, n_layers=6, n_heads=4, d_ff=512, context=32,
        lambda_depth=0.001 if mode == "tsa" else 0.0, seed=0,
        steps=2000 if desk else 10000, batch=32 if desk else 64,
        lr=3e-4, schedule="constant", warmup=100, eval_interval=100,
        n_train=10000, n_test=1000, length=10)


def _char_lm(name, mode, desk: bool) -> ExperimentSpec:
    # desk variant halves the width and keeps the 4x feed-forward ratio and
    # 32-wide heads, so it exercises the identical architecture shape
    return ExperimentSpec(
        name=name, task="lm", mode=mode,
        d=128 if desk else 256, n_layers=6, n_heads=4 if desk else 8,
        d_ff=512 if desk else 1024, context=128,
        lambda_depth=0.001 if mode == "tsa" else 0.0, seed=0,
        steps=2000 if desk else 5000, batch=32 if desk else 64,
        lr=3e-4, schedule="cosine", warmup=100, eval_interval=100,
        limit_bytes=0)


def _build_presets() -> dict[str, ExperimentSpec]:
    out: dict[str, ExperimentSpec] = {}
    for task in ("copy", "sort"):
        for mode in ("baseline", "tsa"):
            for desk in (False, True):
                name = f"{task}-{mode}" + ("-desk" if desk else "")
                out[name] = _synthetic(name, task, mode, desk)
    for mode in ("baseline", "tsa", "early_exit"):
        slug = "ee" if mode == "early_exit" else mode
        for desk in (False, True):
            name = f"char-{slug}" + ("-desk" if desk else "")
            out[name] = _char_lm(name, mode, desk)
    return out


PRESETS = _build_presets()


def preset_names() -> list[str]:
    return sorted(PRESETS)


def get_preset(name: str) -> ExperimentSpec:
    if name not in PRESETS:
        known = ", ".join(preset_names())
        raise ValueError(f"unknown preset {name!r}; available: {known}")
    # hand out a copy so callers can override fields without contaminating
    # the shared table
    return ExperimentSpec.from_dict(PRESETS[name].to_dict())
