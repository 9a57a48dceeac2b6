"""Label-preserving synthetic variants of skeleton sequences.

Sequences are (frames, 66) arrays of 22 joints x (x, y, z).  Every transform
is a pure function of its input and an integer seed.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .data import SkeletonSequence

SCALE_BOUNDS = (0.75, 1.25)
WARP_BOUNDS = (0.5, 2.0)
TECHNIQUES = ("jitter", "scale", "timewarp", "combined")


def _frames(seq) -> np.ndarray:
    frames = np.asarray(seq, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0 or frames.shape[1] % 3:
        raise ValueError(f"expected a non-empty (frames, 3*joints) array, got shape {frames.shape}")
    return frames


def axis_variance(seq) -> np.ndarray:
    """Variance of each coordinate axis (x, y, z) pooled over frames and joints."""
    joints = _frames(seq).reshape(-1, 3)
    # shifting by a sample keeps constant axes at exactly zero variance
    return (joints - joints[0]).var(axis=0)


def jitter(seq, seed: int) -> np.ndarray:
    """Add Gaussian noise whose variance equals the per-axis variance of the sequence."""
    frames = _frames(seq)
    std = np.sqrt(axis_variance(frames))
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(frames.shape).reshape(frames.shape[0], -1, 3) * std
    return frames + noise.reshape(frames.shape)


def draw_scale(seed: int) -> float:
    return float(np.random.default_rng(seed).uniform(*SCALE_BOUNDS))


def scale(seq, seed: int, factor: float | None = None) -> np.ndarray:
    """Multiply every coordinate by one factor drawn uniformly from [0.75, 1.25]."""
    frames = _frames(seq)
    return frames * (draw_scale(seed) if factor is None else factor)


def draw_warp(seed: int) -> float:
    return float(np.random.default_rng(seed).uniform(*WARP_BOUNDS))


def warped_length(length: int, factor: float) -> int:
    return max(2, int(round(length * factor)))


def interpolate(frames: np.ndarray, length: int) -> np.ndarray:
    """Linearly resample every channel onto ``length`` evenly spaced times spanning the sequence."""
    frames = _frames(frames)
    n = frames.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 frames to interpolate, got {n}")
    if length == n:
        return frames.copy()
    pos = np.linspace(0.0, n - 1, length)
    lo = np.minimum(np.floor(pos).astype(int), n - 2)
    frac = (pos - lo)[:, None]
    return frames[lo] * (1.0 - frac) + frames[lo + 1] * frac


def time_warp(seq, seed: int, factor: float | None = None) -> np.ndarray:
    """Resample a length-T sequence to round(T * V) frames, V uniform in [0.5, 2]."""
    frames = _frames(seq)
    if frames.shape[0] < 2:
        raise ValueError(f"time warping needs at least 2 frames, got {frames.shape[0]}")
    v = draw_warp(seed) if factor is None else factor
    return interpolate(frames, warped_length(frames.shape[0], v))


def sub_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def combined(seq, seed: int) -> np.ndarray:
    """Jitter, then scale, then time-warp, each with its own derived seed."""
    s_jit, s_scale, s_warp = sub_seeds(seed, 3)
    return time_warp(scale(jitter(seq, s_jit), s_scale), s_warp)


TRANSFORMS = {"jitter": jitter, "scale": scale, "timewarp": time_warp, "combined": combined}


@dataclass(frozen=True)
class AugmentedRecord:
    sequence: SkeletonSequence
    origin: int
    technique: str
    seed: int

    @property
    def subject(self) -> int:
        return self.sequence.subject


def technique_plan(factor: int) -> list[str]:
    """Techniques for the ``factor - 1`` synthetic variants of one sequence.

    Variants are split as evenly as possible across the four techniques, earlier
    techniques taking the remainder (factor 40 -> 10/10/10/9).
    """
    if factor < 1:
        raise ValueError(f"augmentation factor must be >= 1, got {factor}")
    n = factor - 1
    counts = [n // 4 + (1 if k < n % 4 else 0) for k in range(4)]
    return [t for t, c in zip(TECHNIQUES, counts) for _ in range(c)]


def augment_dataset(sequences: list[SkeletonSequence], factor: int = 40, seed: int = 0) -> list[AugmentedRecord]:
    """Each sequence followed by its ``factor - 1`` variants; labels and subject copied."""
    plan = technique_plan(factor)
    records = []
    for origin, seq in enumerate(sequences):
        records.append(AugmentedRecord(seq, origin, "original", -1))
        for variant, technique in enumerate(plan):
            rec_seed = int(np.random.SeedSequence([seed, origin, variant]).generate_state(1)[0])
            frames = TRANSFORMS[technique](seq.frames, rec_seed)
            records.append(AugmentedRecord(dataclasses.replace(seq, frames=frames), origin, technique, rec_seed))
    return records
