"""Per-fold training, snapshot-ensemble prediction, metrics and LOOCV reports."""

from __future__ import annotations

import json
import logging
import math
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .augment import augment_dataset
from .config import RunConfig
from .data import (DHG_SEQUENCES, TAGS, TAXONOMY, FoldSplit, SkeletonSequence, load_dhg,
                   loocv_folds, windows)
from .fusion import CLASSIFIERS, KnowledgeSharingModel, joint_training_step
from .optim import AdamW, AdamWConfig, SnapshotError, SnapshotStore, cycle_lengths, epoch_schedule

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------

def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.size == 0 or predictions.shape != labels.shape:
        raise ValueError(f"need equal-length non-empty inputs, got {predictions.shape} and {labels.shape}")
    return float((predictions == labels).mean())


def label_grain(label: int, classes: int = 14) -> str:
    gesture = label if classes == 14 else label // 2
    if not 0 <= gesture < len(TAXONOMY):
        raise ValueError(f"label {label} is outside the {classes}-class taxonomy")
    return TAXONOMY[gesture].grain


def grain_breakdown(predictions, labels, classes: int = 14) -> dict:
    """Accuracy on fine-grain samples, coarse-grain samples, and all samples.

    A grain with no samples reports ``None``.
    """
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    grains = np.array([label_grain(int(l), classes) for l in labels])
    out = {}
    for grain in ("fine", "coarse"):
        mask = grains == grain
        out[grain] = accuracy(predictions[mask], labels[mask]) if mask.any() else None
    out["both"] = accuracy(predictions, labels)
    return out


def confusion_counts(predictions, labels, n: int = 14) -> np.ndarray:
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (np.asarray(labels), np.asarray(predictions)), 1)
    return counts


def normalize_rows(counts: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros(counts.shape), where=totals > 0)


def confusion_matrix(predictions, labels, n: int = 14) -> np.ndarray:
    """Rows are true classes, columns predictions, each row normalised by its count."""
    return normalize_rows(confusion_counts(predictions, labels, n))


# ----------------------------------------------------------------------
# prediction
# ----------------------------------------------------------------------

def classifier_probabilities(model: KnowledgeSharingModel, x: np.ndarray, batch: int = 256) -> dict[str, np.ndarray]:
    """Plain softmax probabilities of each of the four classifier heads (eval mode)."""
    model.eval()
    chunks = {name: [] for name in CLASSIFIERS}
    with ag.no_grad():
        for start in range(0, len(x), batch):
            logits = model(ag.Tensor(x[start:start + batch]))
            for name, value in zip(CLASSIFIERS, logits):
                chunks[name].append(ag._softmax(value.data, -1))
    return {name: np.concatenate(parts) for name, parts in chunks.items()}


def ensemble_probabilities(per_snapshot: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    if not per_snapshot:
        raise ValueError("empty snapshot set")
    return {name: np.mean([p[name] for p in per_snapshot], axis=0) for name in per_snapshot[0]}


def predict(models, x: np.ndarray, batch: int = 256) -> dict[str, np.ndarray]:
    """Class probabilities per classifier, averaged over a snapshot set."""
    if isinstance(models, KnowledgeSharingModel):
        models = [models]
    return ensemble_probabilities([classifier_probabilities(m, x, batch) for m in models])


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------

@dataclass
class FoldData:
    split: FoldSplit
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def fold_seed(seed: int, subject: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, subject, stream]).generate_state(1)[0])


def train_fold(config: RunConfig, fold: FoldData, run_dir: str | Path, overwrite: bool = False) -> SnapshotStore:
    """Warm-restart training of one fold; one snapshot per cycle under ``run_dir/snapshots``."""
    run_dir = Path(run_dir)
    store = SnapshotStore(run_dir / "snapshots")
    if len(store):
        if not overwrite:
            raise SnapshotError(f"{store.root} already holds snapshots; pass overwrite to retrain")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    subject = fold.split.subject
    model = KnowledgeSharingModel(config.model_config(), seed=fold_seed(config.seed, subject, 0))
    optimizer = AdamW(model.parameters(), AdamWConfig(config.lr, config.beta1, config.beta2,
                                                      config.eps, config.weight_decay))
    shuffle_rng = np.random.default_rng(fold_seed(config.seed, subject, 1))
    lengths = cycle_lengths(config.base_epochs, config.growth, config.cycles)
    n = len(fold.train_x)
    if n == 0:
        raise ValueError(f"fold {subject} has no training records")

    with open(run_dir / "training_log.jsonl", "w") as trace:
        for plan in epoch_schedule(lengths, config.lr):
            order = shuffle_rng.permutation(n)
            sums = np.zeros(3)
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                try:
                    losses = joint_training_step(model, optimizer, fold.train_x[idx], fold.train_y[idx],
                                                 plan.lr, config.temperature, config.kd_weight)
                except ag.NonFiniteError as exc:
                    raise TrainingAborted(f"fold {subject} epoch {plan.epoch}: {exc}; "
                                          f"{len(store)} earlier snapshot(s) kept in {store.root}") from exc
                if not math.isfinite(losses.total):
                    raise TrainingAborted(f"fold {subject} epoch {plan.epoch}: non-finite loss {losses}")
                sums += np.array(losses) * len(idx)
            mean_t, mean_o, mean_f = sums / n
            val_acc = None
            if len(fold.val_x):
                probs = classifier_probabilities(model, fold.val_x, config.eval_batch)["fusion"]
                val_acc = accuracy(probs.argmax(1), fold.val_y)
            record = {"epoch": plan.epoch, "cycle": plan.cycle, "lr": plan.lr, "loss_transformer": mean_t,
                      "loss_onlstm": mean_o, "loss_fusion": mean_f, "val_fusion_accuracy": val_acc}
            trace.write(json.dumps(record) + "\n")
            trace.flush()
            log.info("fold %d epoch %d/%d lr=%.6f L_t=%.4f L_o=%.4f L_f=%.4f val=%s", subject, plan.epoch,
                     sum(lengths), plan.lr, mean_t, mean_o, mean_f,
                     "-" if val_acc is None else f"{val_acc:.4f}")
            if plan.cycle_end:
                store.save(model, plan.cycle, plan.epoch, extra={"subject": subject})
    return store


# ----------------------------------------------------------------------
# evaluation and reports
# ----------------------------------------------------------------------

def row_names(cycles: Sequence[int]) -> list[str]:
    return [f"cycle_{k}" for k in cycles] + ["ensemble"]


def evaluate_fold(models: Sequence[KnowledgeSharingModel], cycles: Sequence[int], test_x: np.ndarray,
                  test_y: np.ndarray, classes: int = 14, batch: int = 256) -> dict:
    """Per-cycle and snapshot-ensemble accuracies of every classifier on one fold's test set."""
    if not models:
        raise SnapshotError("no snapshots to evaluate")
    per_snapshot = [classifier_probabilities(m, test_x, batch) for m in models]
    rows = dict(zip(row_names(cycles), per_snapshot + [ensemble_probabilities(per_snapshot)]))
    result = {"test_size": int(len(test_y)), "accuracy": {}, "correct": {}}
    for name in CLASSIFIERS:
        result["accuracy"][name] = {}
        result["correct"][name] = {}
        for row, probs in rows.items():
            pred = probs[name].argmax(1)
            result["accuracy"][name][row] = grain_breakdown(pred, test_y, classes)
            result["correct"][name][row] = int((pred == test_y).sum())
    fused = rows["ensemble"]["fusion"].argmax(1)
    result["confusion_counts"] = confusion_counts(fused, test_y, classes).tolist()
    return result


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def aggregate(fold_results: dict[int, dict], cycles: Sequence[int], classes: int = 14) -> dict:
    """Unweighted mean over folds (primary) plus pooled correct/total."""
    rows = row_names(cycles)
    folds = list(fold_results.values())
    total = sum(f["test_size"] for f in folds)
    mean, pooled = {}, {}
    for name in CLASSIFIERS:
        mean[name] = {row: {g: _mean([f["accuracy"][name][row][g] for f in folds])
                            for g in ("fine", "coarse", "both")} for row in rows}
        pooled[name] = {row: sum(f["correct"][name][row] for f in folds) / total for row in rows}
    counts = np.sum([np.array(f["confusion_counts"]) for f in folds], axis=0)
    return {
        "classifiers": list(CLASSIFIERS),
        "rows": rows,
        "labels": list(TAGS) if classes == 14 else [f"{t}/{f}" for t in TAGS for f in (1, 2)],
        "folds": {str(k): v for k, v in fold_results.items()},
        "mean_of_folds": mean,
        "pooled": pooled,
        "primary": "mean_of_folds",
        "confusion_matrix": normalize_rows(counts).tolist(),
    }


def _fmt(value) -> str:
    return "   -  " if value is None else f"{100 * value:6.2f}"


def render_text(report: dict) -> str:
    lines = ["Accuracy (%) per cycle and snapshot ensemble (mean of folds)",
             f"{'Row':<10} {'Classifier':<12} {'Fine':>6} {'Coarse':>6} {'Both':>6}"]
    for row in report["rows"]:
        for name in report["classifiers"]:
            acc = report["mean_of_folds"][name][row]
            lines.append(f"{row:<10} {name:<12} {_fmt(acc['fine'])} {_fmt(acc['coarse'])} {_fmt(acc['both'])}")
    lines.append("")
    lines.append("Per-fold accuracy, fusion snapshot ensemble (both grains):")
    for subject, fold in report["folds"].items():
        lines.append(f"  subject {subject:>2}: {_fmt(fold['accuracy']['fusion']['ensemble']['both'])}"
                     f"  (n={fold['test_size']})")
    lines.append("")
    lines.append("Confusion matrix (fusion snapshot ensemble, row-normalised %):")
    labels = report["labels"]
    matrix = np.array(report["confusion_matrix"])
    present = [i for i in range(len(labels)) if matrix[i].sum() > 0]
    lines.append(" " * 7 + "".join(f"{labels[j]:>7}" for j in present))
    for i in present:
        lines.append(f"{labels[i]:>6} " + "".join(f"{100 * matrix[i, j]:7.1f}" for j in present))
    return "\n".join(lines) + "\n"


def render_csv(report: dict) -> str:
    lines = ["row,classifier,fine,coarse,both,pooled_both"]
    for row in report["rows"]:
        for name in report["classifiers"]:
            acc = report["mean_of_folds"][name][row]
            cells = ["" if acc[g] is None else f"{acc[g]:.6f}" for g in ("fine", "coarse", "both")]
            lines.append(",".join([row, name, *cells, f"{report['pooled'][name][row]:.6f}"]))
    return "\n".join(lines) + "\n"


def write_report(report: dict, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out_dir / "report.csv").write_text(render_csv(report))
    (out_dir / "report.txt").write_text(render_text(report))


# ----------------------------------------------------------------------
# orchestration
# ----------------------------------------------------------------------

def expected_sequences(root: str | Path) -> int | None:
    meta = Path(root) / "synth_meta.json"
    if meta.is_file():
        return int(json.loads(meta.read_text())["sequences"])
    return DHG_SEQUENCES


def load_dataset(config: RunConfig) -> list[SkeletonSequence]:
    return load_dhg(config.data, expected=expected_sequences(config.data))


def prepare_folds(config: RunConfig, dataset: list[SkeletonSequence], subjects: Sequence[int],
                  with_training: bool = True) -> list[FoldData]:
    labels = np.array([s.label(config.classes) for s in dataset])
    test_x = windows(dataset, config.window, config.center)
    if with_training:
        augmented = augment_dataset(dataset, config.augment_factor, config.seed)
        aug_x = windows([r.sequence for r in augmented], config.window, config.center)
        aug_y = labels[[r.origin for r in augmented]]
    else:
        augmented, aug_x, aug_y = [], np.zeros((0, config.window, test_x.shape[-1])), np.zeros(0, int)
    if with_training:
        splits = loocv_folds(dataset, augmented, subjects)
    else:
        splits = [FoldSplit(k, np.zeros(0, int), np.zeros(0, int),
                            np.flatnonzero([s.subject == k for s in dataset])) for k in subjects]
        if any(len(s.test) == 0 for s in splits):
            raise ValueError(f"some of subjects {list(subjects)} have no sequences")
    return [FoldData(s, aug_x[s.train], aug_y[s.train], aug_x[s.validation], aug_y[s.validation],
                     test_x[s.test], labels[s.test]) for s in splits]


def report_config(config: RunConfig) -> dict:
    # paths are excluded so reports of identical runs compare equal
    return {k: v for k, v in config.to_dict().items() if k not in ("data", "out")}


def evaluate_run(config: RunConfig, out_dir: str | Path, subjects: Sequence[int] | None = None,
                 dataset: list[SkeletonSequence] | None = None) -> dict:
    """Rebuild the report from saved snapshots and the un-augmented test data."""
    out_dir = Path(out_dir)
    dataset = dataset if dataset is not None else load_dataset(config)
    if subjects is None:
        subjects = sorted(int(p.name.split("_", 1)[1]) for p in out_dir.glob("fold_*")
                          if SnapshotStore(p / "snapshots").cycles())
    if not subjects:
        raise SnapshotError(f"missing snapshots: no fold_*/snapshots under {out_dir}")
    folds = prepare_folds(config, dataset, subjects, with_training=False)
    results, cycles = {}, None
    for fold in folds:
        store = SnapshotStore(out_dir / f"fold_{fold.split.subject}" / "snapshots")
        if not store.cycles():
            raise SnapshotError(f"missing snapshots: {store.root} holds none for fold {fold.split.subject}")
        models = store.load_all()
        cycles = store.cycles()
        results[fold.split.subject] = evaluate_fold(models, cycles, fold.test_x, fold.test_y,
                                                    config.classes, config.eval_batch)
    report = aggregate(results, cycles, config.classes)
    report["config"] = report_config(config)
    return report


def run_loocv(config: RunConfig, out_dir: str | Path | None = None, overwrite: bool = False) -> dict:
    """Train every selected fold, evaluate its snapshots, write and return the report."""
    out_dir = Path(out_dir or config.out)
    dataset = load_dataset(config)
    subjects = config.fold_subjects(sorted({s.subject for s in dataset}))
    folds = prepare_folds(config, dataset, subjects)
    results = {}
    cycles = list(range(1, config.cycles + 1))
    for fold in folds:
        fold_dir = out_dir / f"fold_{fold.split.subject}"
        store = train_fold(config, fold, fold_dir, overwrite=overwrite)
        models = [store.load(k) for k in cycles]
        results[fold.split.subject] = evaluate_fold(models, cycles, fold.test_x, fold.test_y,
                                                    config.classes, config.eval_batch)
        (fold_dir / "fold_report.json").write_text(json.dumps(results[fold.split.subject], indent=2) + "\n")
    report = aggregate(results, cycles, config.classes)
    report["config"] = report_config(config)
    write_report(report, out_dir)
    return report
