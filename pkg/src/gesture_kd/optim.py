"""AdamW, the warm-restart cosine schedule, and on-disk parameter snapshots."""

from __future__ import annotations

import json
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .autograd import NonFiniteError, Tensor
from .config import ModelConfig


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.001

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")


class AdamW:
    """Adam with weight decay applied outside the moment estimates.

    Decay touches only parameters flagged ``decay=True`` (weight matrices);
    plain tensors without the flag are decayed too, which keeps the optimizer
    usable on bare tensors.
    """

    def __init__(self, params: Iterable[Tensor], config: AdamWConfig = AdamWConfig()):
        self.params = list(params)
        self.config = config
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        cfg = self.config
        lr = cfg.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for parameter of shape {p.shape}")
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            direction = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            if cfg.weight_decay and getattr(p, "decay", True):
                p.data *= 1.0 - lr * cfg.weight_decay
            p.data -= lr * direction

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}


def cycle_lengths(base: int, growth: float, n: int) -> list[int]:
    """Epochs per warm-restart cycle: each cycle is ceil(previous * growth)."""
    if base < 1 or growth < 1 or n < 1:
        raise ValueError(f"invalid cycle plan base={base}, growth={growth}, n={n}")
    lengths = [int(base)]
    for _ in range(n - 1):
        # round before ceil so 10*1.5*1.5 style products do not pick up an ulp
        lengths.append(int(math.ceil(round(lengths[-1] * growth, 9))))
    return lengths


def cosine_lr(step: float, steps: int, eta_max: float, eta_min: float = 0.0) -> float:
    if steps <= 0 or not 0 <= step <= steps:
        raise ValueError(f"step {step} outside cycle of {steps}")
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + math.cos(math.pi * step / steps))


@dataclass(frozen=True)
class EpochPlan:
    cycle: int          # 1-based
    epoch_in_cycle: int  # 0-based
    epoch: int          # 1-based global epoch
    lr: float
    cycle_end: bool


def epoch_schedule(lengths: list[int], eta_max: float, eta_min: float = 0.0) -> Iterator[EpochPlan]:
    """Per-epoch learning rates, restarting at ``eta_max`` at every cycle boundary."""
    epoch = 0
    for k, length in enumerate(lengths, 1):
        for e in range(length):
            epoch += 1
            yield EpochPlan(k, e, epoch, cosine_lr(e, length, eta_max, eta_min), e == length - 1)


# ----------------------------------------------------------------------
# snapshots
# ----------------------------------------------------------------------

MANIFEST_HEADER = "# gesture_kd snapshot v1"
BLOB_DTYPE = "<f8"


class SnapshotError(RuntimeError):
    pass


class SnapshotStore:
    """Directory of per-cycle parameter snapshots: ``cycle_{k}/manifest.txt + params.bin``.

    Snapshots are written atomically and never overwritten.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, cycle: int) -> Path:
        return self.root / f"cycle_{cycle}"

    def cycles(self) -> list[int]:
        if not self.root.is_dir():
            return []
        found = []
        for d in self.root.iterdir():
            if d.is_dir() and d.name.startswith("cycle_") and (d / "manifest.txt").is_file():
                found.append(int(d.name.split("_", 1)[1]))
        return sorted(found)

    def __len__(self) -> int:
        return len(self.cycles())

    def save(self, model, cycle: int, epoch: int, extra: dict | None = None) -> Path:
        target = self.path(cycle)
        if target.exists():
            raise SnapshotError(f"snapshot {target} already exists; snapshots are append-only")
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".cycle_{cycle}.", dir=self.root))
        try:
            lines = [MANIFEST_HEADER,
                     f"cycle = {cycle}",
                     f"epoch = {epoch}",
                     f"seed = {model.seed}",
                     f"dtype = {BLOB_DTYPE}",
                     f"config = {json.dumps(asdict(model.config), sort_keys=True)}",
                     f"rng = {json.dumps(model.rng.bit_generator.state, sort_keys=True)}"]
            for key, value in (extra or {}).items():
                lines.append(f"{key} = {json.dumps(value)}")
            offset = 0
            with open(tmp / "params.bin", "wb") as blob:
                for name, array in model.state_dict().items():
                    raw = np.ascontiguousarray(array, dtype=BLOB_DTYPE).tobytes()
                    blob.write(raw)
                    shape = ",".join(str(d) for d in array.shape) or "scalar"
                    lines.append(f"tensor {name} {shape} {offset}")
                    offset += len(raw)
            (tmp / "manifest.txt").write_text("\n".join(lines) + "\n")
            os.replace(tmp, target)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        return target

    def read_manifest(self, cycle: int) -> dict:
        path = self.path(cycle) / "manifest.txt"
        if not path.is_file():
            raise SnapshotError(f"missing snapshot manifest {path}")
        lines = path.read_text().splitlines()
        if not lines or lines[0] != MANIFEST_HEADER:
            raise SnapshotError(f"corrupt snapshot manifest {path}: bad header")
        meta: dict = {"tensors": []}
        for lineno, line in enumerate(lines[1:], 2):
            if line.startswith("tensor "):
                parts = line.split()
                if len(parts) != 4:
                    raise SnapshotError(f"corrupt snapshot manifest {path}:{lineno}: {line!r}")
                _, name, shape, offset = parts
                dims = () if shape == "scalar" else tuple(int(d) for d in shape.split(","))
                meta["tensors"].append((name, dims, int(offset)))
            elif " = " in line:
                key, value = line.split(" = ", 1)
                try:
                    meta[key] = json.loads(value)
                except json.JSONDecodeError:
                    meta[key] = value
            else:
                raise SnapshotError(f"corrupt snapshot manifest {path}:{lineno}: {line!r}")
        for key in ("cycle", "epoch", "seed", "config"):
            if key not in meta:
                raise SnapshotError(f"corrupt snapshot manifest {path}: missing {key}")
        return meta

    def load(self, cycle: int, model=None):
        """Restore snapshot ``cycle`` into ``model`` (built from the manifest if omitted)."""
        from .fusion import KnowledgeSharingModel

        meta = self.read_manifest(cycle)
        if model is None:
            model = KnowledgeSharingModel(ModelConfig(**meta["config"]), seed=int(meta["seed"]))
        blob = (self.path(cycle) / "params.bin").read_bytes()
        expected = model.state_dict()
        stored = {name: (dims, offset) for name, dims, offset in meta["tensors"]}
        if set(stored) != set(expected):
            raise SnapshotError(f"snapshot {cycle} tensor names do not match the model: "
                                f"{sorted(set(stored) ^ set(expected))}")
        state = {}
        for name, target in expected.items():
            dims, offset = stored[name]
            if dims != target.shape:
                raise SnapshotError(f"shape mismatch for {name}: manifest has {dims}, model expects {target.shape}")
            count = int(np.prod(dims, dtype=np.int64))
            end = offset + 8 * count
            if end > len(blob):
                raise SnapshotError(f"params.bin for cycle {cycle} is truncated at {name}")
            state[name] = np.frombuffer(blob, dtype=BLOB_DTYPE, count=count, offset=offset).reshape(dims)
        model.load_state_dict(state)
        if "rng" in meta:
            model.rng.bit_generator.state = meta["rng"]
        model.eval()
        return model

    def load_all(self) -> list:
        cycles = self.cycles()
        if not cycles:
            raise SnapshotError(f"no snapshots found under {self.root}")
        return [self.load(k) for k in cycles]
