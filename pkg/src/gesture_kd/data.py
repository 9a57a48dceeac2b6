"""DHG-14/28 skeleton ingestion, gesture taxonomy, windowing and LOOCV folds."""

from __future__ import annotations

import io
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

JOINTS = 22
FEATURES = JOINTS * 3
DHG_TEMPLATE = "gesture_{gesture}/finger_{finger}/subject_{subject}/essai_{trial}/skeleton_world.txt"
DHG_SEQUENCES = 2800


class DatasetError(ValueError):
    pass


class Gesture(NamedTuple):
    gesture: int
    name: str
    grain: str
    tag: str


TAXONOMY: tuple[Gesture, ...] = (
    Gesture(1, "Grab", "fine", "G"),
    Gesture(2, "Tap", "coarse", "T"),
    Gesture(3, "Expand", "fine", "E"),
    Gesture(4, "Pinch", "fine", "P"),
    Gesture(5, "Rotation Clockwise", "fine", "R-CW"),
    Gesture(6, "Rotation Counter-clockwise", "fine", "R-CCW"),
    Gesture(7, "Swipe Right", "coarse", "S-R"),
    Gesture(8, "Swipe Left", "coarse", "S-L"),
    Gesture(9, "Swipe Up", "coarse", "S-U"),
    Gesture(10, "Swipe Down", "coarse", "S-D"),
    Gesture(11, "Swipe X", "coarse", "S-X"),
    Gesture(12, "Swipe V", "coarse", "S-V"),
    Gesture(13, "Swipe +", "coarse", "S-+"),
    Gesture(14, "Shake", "coarse", "Sh"),
)
TAGS = tuple(g.tag for g in TAXONOMY)


def grain_of(label14: int) -> str:
    """Grain of a 0-based 14-class label."""
    return TAXONOMY[label14].grain


@dataclass(frozen=True)
class SkeletonSequence:
    frames: np.ndarray = field(repr=False)
    subject: int
    gesture: int
    finger: int = 1
    trial: int = 1
    path: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != FEATURES:
            raise DatasetError(f"frames must be (n, {FEATURES}), got {frames.shape}")
        if not np.isfinite(frames).all():
            raise DatasetError(f"non-finite coordinates in sequence {self.path or '<memory>'}")
        object.__setattr__(self, "frames", frames)

    @property
    def label14(self) -> int:
        return self.gesture - 1

    @property
    def label28(self) -> int:
        return 2 * (self.gesture - 1) + (self.finger - 1)

    def label(self, classes: int = 14) -> int:
        if classes == 14:
            return self.label14
        if classes == 28:
            return self.label28
        raise ValueError(f"label protocol must be 14 or 28 classes, got {classes}")


def parse_skeleton_file(source, name: str | None = None) -> np.ndarray:
    """Parse whitespace-separated frames of 66 world coordinates, one frame per line."""
    if isinstance(source, (str, Path)):
        name = name or str(source)
        text = Path(source).read_text()
    else:
        text = source.read()
        name = name or getattr(source, "name", "<stream>")
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != FEATURES:
            raise DatasetError(f"{name}:{lineno}: expected {FEATURES} values, found {len(tokens)}")
        try:
            rows.append([float(t) for t in tokens])
        except ValueError as exc:
            raise DatasetError(f"{name}:{lineno}: non-numeric token ({exc})") from None
    if not rows:
        raise DatasetError(f"{name}: empty skeleton file")
    return np.array(rows)


def format_skeleton(frames: np.ndarray) -> str:
    buf = io.StringIO()
    np.savetxt(buf, np.asarray(frames), fmt="%.17g")
    return buf.getvalue()


def write_skeleton_file(path: str | Path, frames: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_skeleton(frames))


def _template_regex(template: str) -> re.Pattern:
    pattern = re.escape(template)
    for key in ("gesture", "finger", "subject", "trial"):
        pattern = pattern.replace(re.escape("{" + key + "}"), f"(?P<{key}>\\d+)")
    return re.compile(pattern + "$")


def load_dhg(root: str | Path, template: str = DHG_TEMPLATE, expected: int | None = DHG_SEQUENCES) -> list[SkeletonSequence]:
    """Load every skeleton file under ``root`` whose relative path matches ``template``.

    Labels come from the path.  Holes in the observed gesture x finger x subject x
    trial grid and a total different from ``expected`` are reported as warnings.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    regex = _template_regex(template)
    found = []
    for path in sorted(root.rglob("*")):
        if not path.is_file():
            continue
        m = regex.match(path.relative_to(root).as_posix())
        if m:
            keys = {k: int(v) for k, v in m.groupdict().items()}
            found.append((keys, path))
    if not found:
        raise DatasetError(f"no skeleton files matching {template!r} under {root}")
    found.sort(key=lambda kp: (kp[0]["gesture"], kp[0]["finger"], kp[0]["subject"], kp[0]["trial"]))
    sequences = [SkeletonSequence(parse_skeleton_file(path), path=str(path), **keys) for keys, path in found]

    axes = {k: sorted({keys[k] for keys, _ in found}) for k in ("gesture", "finger", "subject", "trial")}
    present = {tuple(keys[k] for k in ("gesture", "finger", "subject", "trial")) for keys, _ in found}
    missing = [(g, f, s, t) for g in axes["gesture"] for f in axes["finger"]
               for s in axes["subject"] for t in axes["trial"] if (g, f, s, t) not in present]
    if missing:
        shown = [str(root / template.format(gesture=g, finger=f, subject=s, trial=t))
                 for g, f, s, t in missing[:10]]
        warnings.warn(f"{len(missing)} expected skeleton files are missing, e.g. {shown}")
    if expected is not None and len(sequences) != expected:
        warnings.warn(f"loaded {len(sequences)} sequences from {root}, expected {expected} "
                      f"(gestures {axes['gesture']}, fingers {axes['finger']}, "
                      f"subjects {axes['subject']}, trials {axes['trial']})")
    return sequences


def resample_to_window(frames, target: int = 64) -> np.ndarray:
    """Linear resampling of every channel onto ``target`` evenly spaced frames."""
    from .augment import interpolate

    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 2:
        raise DatasetError(f"need at least 2 frames to build a window, got shape {frames.shape}")
    return interpolate(frames, target)


def center_window(window: np.ndarray) -> np.ndarray:
    """Subtract the window's mean joint position from every joint (per axis)."""
    window = np.asarray(window, dtype=np.float64)
    joints = window.reshape(window.shape[0], -1, 3)
    return (joints - joints.mean(axis=(0, 1))).reshape(window.shape)


def windows(sequences: Sequence[SkeletonSequence], target: int = 64, center: bool = False) -> np.ndarray:
    """Stack of resampled windows; raw world coordinates unless ``center`` is set."""
    if not sequences:
        return np.zeros((0, target, FEATURES))
    out = np.stack([resample_to_window(s.frames, target) for s in sequences])
    if center:
        out = np.stack([center_window(w) for w in out])
    return out


@dataclass(frozen=True)
class FoldSplit:
    subject: int
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


def loocv_folds(dataset: Sequence[SkeletonSequence], augmented: Sequence, subjects: Sequence[int] | None = None) -> list[FoldSplit]:
    """One leave-one-subject-out split per subject.

    ``train``/``validation`` index ``augmented`` records (subject decided by the
    record's origin sequence); ``test`` indexes the un-augmented ``dataset``.
    """
    present = sorted({s.subject for s in dataset})
    subjects = present if subjects is None else list(subjects)
    absent = [s for s in subjects if s not in present]
    if absent:
        raise DatasetError(f"subjects {absent} have no sequences in the dataset")
    origin_subject = np.array([dataset[r.origin].subject for r in augmented])
    record_subject = np.array([r.sequence.subject for r in augmented])
    if not np.array_equal(origin_subject, record_subject):
        raise DatasetError("augmented records disagree with their origin's subject")
    test_subject = np.array([s.subject for s in dataset])
    return [FoldSplit(k,
                      np.flatnonzero(origin_subject != k),
                      np.flatnonzero(origin_subject == k),
                      np.flatnonzero(test_subject == k)) for k in subjects]
