"""Synthetic hand-gesture sequences written in the DHG directory layout.

Each gesture class is a parametric motion of a 22-joint hand skeleton:
finger closure/opening for grab, expand and pinch, rotation about the camera
axis for the rotations, straight or polyline translations for the swipes, and
oscillation for shake.  Subjects differ by hand size and a global offset;
trials differ by duration, amplitude and sensor noise.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import DHG_TEMPLATE, TAXONOMY, SkeletonSequence, format_skeleton, resample_to_window

# wrist, palm, then 4 joints each for thumb, index, middle, ring, pinky
_FINGER_BASES = np.array([[-0.035, 0.030], [-0.020, 0.080], [0.000, 0.085], [0.020, 0.080], [0.037, 0.070]])
_FINGER_DIRS = np.array([[-0.6, 0.8], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0], [0.15, 0.99]])
_SEGMENTS = np.array([0.0, 0.03, 0.055, 0.075])
HAND_ORIGIN = np.array([0.0, 0.0, 0.45])


def rest_pose() -> np.ndarray:
    pose = np.zeros((22, 3))
    pose[1] = [0.0, 0.04, 0.0]
    for f in range(5):
        for j, length in enumerate(_SEGMENTS):
            pose[2 + 4 * f + j, :2] = _FINGER_BASES[f] + _FINGER_DIRS[f] * length
    return pose


THUMB = list(range(2, 6))
INDEX = list(range(6, 10))
FINGERS = list(range(2, 22))


def _smooth(t):
    return t * t * (3.0 - 2.0 * t)


def _close(pose, joints, amount, target=None):
    pose = pose.copy()
    centre = pose[1] if target is None else target
    pose[joints] = centre + (pose[joints] - centre) * (1.0 - 0.75 * amount)
    return pose


def _rotate_z(pose, angle):
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return (pose - pose[1]) @ rot.T + pose[1]


def _polyline(points, t):
    points = np.asarray(points, dtype=float)
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)]) / seg.sum()
    out = np.empty((len(t), points.shape[1]))
    for d in range(points.shape[1]):
        out[:, d] = np.interp(t, cum, points[:, d])
    return out


_PATHS = {
    7: [[0, 0], [1, 0]],
    8: [[0, 0], [-1, 0]],
    9: [[0, 0], [0, 1]],
    10: [[0, 0], [0, -1]],
    11: [[-0.5, 0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, -0.5]],
    12: [[-0.5, 0.5], [0, -0.5], [0.5, 0.5]],
    13: [[0, 0.5], [0, -0.5], [-0.5, 0], [0.5, 0]],
}


def gesture_motion(gesture: int, n: int, amplitude: float, pose: np.ndarray) -> np.ndarray:
    """(n, 22, 3) joint trajectory of one gesture around ``pose``."""
    t = np.linspace(0.0, 1.0, n)
    s = _smooth(t)
    frames = np.repeat(pose[None], n, axis=0)
    if gesture in (1, 3, 4):
        amount = s if gesture != 3 else 1.0 - s
        for k in range(n):
            if gesture == 4:
                tip_mid = 0.5 * (pose[5] + pose[9])
                frames[k] = _close(pose, THUMB + INDEX, amount[k] * amplitude, tip_mid)
            else:
                frames[k] = _close(pose, FINGERS, amount[k] * amplitude)
    elif gesture == 2:
        frames[:, :, 2] -= 0.06 * amplitude * np.sin(np.pi * t)[:, None]
    elif gesture in (5, 6):
        sign = -1.0 if gesture == 5 else 1.0
        for k in range(n):
            frames[k] = _rotate_z(pose, sign * 0.5 * np.pi * amplitude * s[k])
    elif gesture in _PATHS:
        path = _polyline(_PATHS[gesture], t) * 0.15 * amplitude
        frames[:, :, :2] += path[:, None, :]
    elif gesture == 14:
        frames[:, :, 0] += 0.04 * amplitude * np.sin(4.0 * np.pi * t)[:, None]
    else:
        raise ValueError(f"unknown gesture {gesture}")
    return frames


def _one_finger(pose):
    # second finger configuration: middle, ring and pinky folded
    return _close(pose, list(range(10, 22)), 0.8)


def synth_generator(num_classes: int = 4, subjects: int = 6, trials: int = 5, seed: int = 0,
                    fingers: int = 1, noise: float = 0.002) -> list[SkeletonSequence]:
    """Deterministic synthetic dataset over gestures ``1..num_classes``."""
    if not 1 <= num_classes <= len(TAXONOMY):
        raise ValueError(f"num_classes must be in [1, {len(TAXONOMY)}], got {num_classes}")
    if subjects < 1 or trials < 1 or fingers not in (1, 2):
        raise ValueError(f"invalid counts: subjects={subjects}, trials={trials}, fingers={fingers}")
    root_ss = np.random.SeedSequence(seed)
    subject_traits = []
    for child in root_ss.spawn(subjects):
        rng = np.random.default_rng(child)
        subject_traits.append((rng.uniform(0.9, 1.1), rng.normal(0.0, 0.005, size=3)))
    base = rest_pose()
    sequences = []
    for g in range(1, num_classes + 1):
        for f in range(1, fingers + 1):
            for s in range(1, subjects + 1):
                size, offset = subject_traits[s - 1]
                for e in range(1, trials + 1):
                    rng = np.random.default_rng([seed, g, f, s, e])
                    pose = base * size
                    if f == 2:
                        pose = _one_finger(pose)
                    n = int(rng.integers(40, 81))
                    amplitude = rng.uniform(0.85, 1.15)
                    motion = gesture_motion(g, n, amplitude, pose) + HAND_ORIGIN + offset
                    motion = motion + rng.normal(0.0, noise, size=motion.shape)
                    sequences.append(SkeletonSequence(motion.reshape(n, -1), subject=s, gesture=g,
                                                      finger=f, trial=e))
    return sequences


def nearest_centroid_accuracy(sequences: list[SkeletonSequence], window: int = 32) -> float:
    """Leave-one-subject-out accuracy of a nearest-class-centroid classifier on flattened windows."""
    x = np.stack([resample_to_window(s.frames, window).ravel() for s in sequences])
    y = np.array([s.label14 for s in sequences])
    subj = np.array([s.subject for s in sequences])
    correct = 0
    for k in np.unique(subj):
        train, test = subj != k, subj == k
        classes = np.unique(y[train])
        centroids = np.stack([x[train & (y == c)].mean(axis=0) for c in classes])
        d = ((x[test][:, None, :] - centroids[None]) ** 2).sum(-1)
        correct += int((classes[d.argmin(1)] == y[test]).sum())
    return correct / len(sequences)


def write_dataset(sequences: list[SkeletonSequence], root: str | Path, meta: dict | None = None) -> Path:
    root = Path(root)
    for seq in sequences:
        rel = DHG_TEMPLATE.format(gesture=seq.gesture, finger=seq.finger, subject=seq.subject, trial=seq.trial)
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(format_skeleton(seq.frames))
    if meta is not None:
        (root / "synth_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return root


def generate_to_disk(root: str | Path, num_classes: int = 4, subjects: int = 6, trials: int = 5,
                     seed: int = 0, fingers: int = 1) -> dict:
    """Generate, check learnability with the centroid baseline, and write the dataset."""
    sequences = synth_generator(num_classes, subjects, trials, seed, fingers)
    meta = {
        "num_classes": num_classes, "subjects": subjects, "trials": trials, "fingers": fingers,
        "seed": seed, "sequences": len(sequences),
        "nearest_centroid_loso_accuracy": nearest_centroid_accuracy(sequences),
    }
    write_dataset(sequences, root, meta)
    return meta
