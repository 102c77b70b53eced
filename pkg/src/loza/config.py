"""Experiment configuration: one JSON document, one dataclass per section."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .attention import SparsePattern
from .model import ConfigError, ModelConfig


def _take(cls, section: str, d: Optional[dict]):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(unknown)}")
    return cls(**d)


@dataclass
class TrainConfig:
    steps: int = 1000  # T1: length of the base ("mid-training") run
    rewind_step: int = 100  # T0: where the rewind checkpoint is taken
    lr: float = 3e-3
    batch_size: int = 16
    lengths: list[int] = field(default_factory=lambda: [32, 64, 128])
    min_distance: int = 4
    answer_weight: float = 2.0

    def __post_init__(self):
        if self.steps < 0 or not 0 <= self.rewind_step <= self.steps:
            raise ConfigError(f"need 0 <= rewind_step ({self.rewind_step}) <= steps ({self.steps})")
        if self.batch_size < 1 or not self.lengths or min(self.lengths) < 8:
            raise ConfigError("batch_size must be >= 1 and every training length >= 8")


@dataclass
class CalibrateConfig:
    steps: int = 60
    lr: float = 0.05
    l1_lambda: float = 0.0
    batch_size: int = 16
    loss: str = "lm"  # lm | task | distill
    n_batches: int = 8

    def __post_init__(self):
        if self.loss not in ("lm", "task", "distill"):
            raise ConfigError(f"calibrate.loss must be lm, task or distill, got {self.loss!r}")


@dataclass
class PilotConfig:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    ratio: float = 0.5
    eval_long: int = 128
    eval_short: int = 64
    sparse_train_steps: Optional[int] = None  # default: steps - rewind_step
    workers: int = 1


@dataclass
class BenchConfig:
    context_lens: list[int] = field(default_factory=lambda: [4096, 32768, 131072, 262144])
    sparse_ratio: float = 0.5
    n_layers: int = 8
    n_heads: int = 8
    head_dim: int = 64
    ffn_dim: int = 2048
    n_ranks: int = 2
    balance_context: int = 65536
    pattern: dict = field(default_factory=lambda: {"sink_blocks": 1, "local_blocks": 7, "block_size": 128})


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(n_layers=8, max_seq_len=128))
    pattern: SparsePattern = field(default_factory=lambda: SparsePattern(1, 3, 16))
    train: TrainConfig = field(default_factory=TrainConfig)
    calibrate: CalibrateConfig = field(default_factory=CalibrateConfig)
    pilot: PilotConfig = field(default_factory=PilotConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @property
    def bench_pattern(self) -> SparsePattern:
        return SparsePattern.from_dict(self.bench.pattern)

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "pattern": self.pattern.to_dict(),
            "train": asdict(self.train),
            "calibrate": asdict(self.calibrate),
            "pilot": asdict(self.pilot),
            "bench": asdict(self.bench),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        sections = {"model", "pattern", "train", "calibrate", "pilot", "bench"}
        unknown = sorted(set(d) - sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
        base = cls()
        model = ModelConfig.from_dict({**base.model.to_dict(), **d.get("model", {})})
        pat = d.get("pattern")
        if pat is not None:
            bad = sorted(set(pat) - {"sink_blocks", "local_blocks", "block_size"})
            if bad:
                raise ConfigError(f"unknown keys in [pattern]: {', '.join(bad)}")
            pattern = SparsePattern.from_dict({**base.pattern.to_dict(), **pat})
        else:
            pattern = base.pattern
        cfg = cls(
            model=model,
            pattern=pattern,
            train=_take(TrainConfig, "train", d.get("train")),
            calibrate=_take(CalibrateConfig, "calibrate", d.get("calibrate")),
            pilot=_take(PilotConfig, "pilot", d.get("pilot")),
            bench=_take(BenchConfig, "bench", d.get("bench")),
        )
        if max(cfg.train.lengths) > cfg.model.max_seq_len:
            raise ConfigError(f"training length {max(cfg.train.lengths)} exceeds max_seq_len {cfg.model.max_seq_len}")
        return cfg


def load_config(path: Optional[str | Path]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(doc)
