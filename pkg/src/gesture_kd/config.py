"""Model and run configuration, profiles, and the flat key=value config file."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


@dataclass(frozen=True)
class ModelConfig:
    seq_len: int = 64
    d_model: int = 66
    heads: int = 11
    ff_dim: int = 264
    blocks: int = 3
    fc_dim: int = 512
    num_classes: int = 14
    lstm_hidden: int = 660
    chunk_size: int = 33
    dropout: float = 0.5

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.lstm_hidden % self.chunk_size:
            raise ValueError(f"chunk_size={self.chunk_size} does not divide lstm_hidden={self.lstm_hidden}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def master_dim(self) -> int:
        return self.lstm_hidden // self.chunk_size

    @property
    def flatten_dim(self) -> int:
        return self.seq_len * self.d_model


PAPER_MODEL = ModelConfig()

# Small enough to train 3 LOOCV folds on one CPU core in a few minutes.
DESK_MODEL = ModelConfig(seq_len=32, d_model=66, heads=11, ff_dim=66, blocks=3, fc_dim=64,
                         num_classes=14, lstm_hidden=48, chunk_size=6, dropout=0.5)


@dataclass
class RunConfig:
    data: str = "data"
    out: str = "runs/default"
    seed: int = 0
    cycles: int = 4
    base_epochs: int = 10
    growth: float = 1.5
    batch_size: int = 512
    window: int = 64
    center: bool = False
    temperature: float = 3.0
    kd_weight: float = 1.0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.001
    augment_factor: int = 40
    folds: str = "all"
    classes: int = 14
    profile: str = "paper"
    # model architecture
    d_model: int = 66
    heads: int = 11
    ff_dim: int = 264
    blocks: int = 3
    fc_dim: int = 512
    lstm_hidden: int = 660
    chunk_size: int = 33
    dropout: float = 0.5
    eval_batch: int = 256

    def model_config(self) -> ModelConfig:
        return ModelConfig(seq_len=self.window, d_model=self.d_model, heads=self.heads,
                           ff_dim=self.ff_dim, blocks=self.blocks, fc_dim=self.fc_dim,
                           num_classes=self.classes, lstm_hidden=self.lstm_hidden,
                           chunk_size=self.chunk_size, dropout=self.dropout)

    def fold_subjects(self, available: list[int]) -> list[int]:
        if self.folds in ("all", ""):
            return sorted(available)
        chosen = [int(s) for s in str(self.folds).replace(",", " ").split()]
        missing = [s for s in chosen if s not in available]
        if missing:
            raise ValueError(f"requested fold subjects not in dataset: {missing}")
        return chosen

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


PROFILES: dict[str, dict] = {
    "paper": {},
    "desk": dict(
        profile="desk", cycles=4, base_epochs=3, growth=1.5, batch_size=32, window=DESK_MODEL.seq_len,
        augment_factor=8, folds="1 2 3", d_model=DESK_MODEL.d_model, heads=DESK_MODEL.heads,
        ff_dim=DESK_MODEL.ff_dim, blocks=DESK_MODEL.blocks, fc_dim=DESK_MODEL.fc_dim,
        lstm_hidden=DESK_MODEL.lstm_hidden, chunk_size=DESK_MODEL.chunk_size,
    ),
}


def profile_config(name: str, **overrides) -> RunConfig:
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return RunConfig(**{**PROFILES[name], **overrides})


def _coerce(value: str, kind):
    if kind is bool or kind == "bool":
        lowered = value.lower()
        if lowered not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(value)
        return lowered in ("true", "1", "yes")
    if kind is int or kind == "int":
        return int(value)
    if kind is float or kind == "float":
        return float(value)
    return value


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(value, types[key])
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: bad value for {key}: {value!r}") from exc
    return values


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    """Profile defaults, then file values, then explicit overrides."""
    file_values = parse_config_text(Path(path).read_text()) if path else {}
    merged = {**file_values, **{k: v for k, v in overrides.items() if v is not None}}
    return profile_config(merged.pop("profile", "paper"), **merged)


def dump_config(config: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config.to_dict().items())
