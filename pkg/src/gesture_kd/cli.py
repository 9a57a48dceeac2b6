"""Command-line interface: ``gesture-kd <command> [flags]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import dump_config, load_config

log = logging.getLogger("gesture_kd")

# fusion snapshot ensemble on DHG-14, 20 folds (fine / coarse / both, %)
REFERENCE = {"fine": 81.20, "coarse": 88.83, "both": 86.11}
REFERENCE_SPREAD = 2.0
GRADCHECK_TOLERANCE = 1e-5


class CLIError(Exception):
    pass


def _run_config(args, **fixed):
    overrides = {
        "data": args.data, "out": args.out, "seed": args.seed, "cycles": args.cycles,
        "base_epochs": args.epochs, "batch_size": args.batch, "temperature": args.temperature,
        "classes": args.classes, "profile": args.profile, "augment_factor": args.factor,
        "folds": None if args.fold is None else str(args.fold),
    }
    overrides.update(fixed)
    return load_config(args.config, **overrides)


def _emit(report: dict, fmt: str) -> None:
    from .harness import render_csv, render_text

    if fmt == "json":
        sys.stdout.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
    elif fmt == "csv":
        sys.stdout.write(render_csv(report))
    else:
        sys.stdout.write(render_text(report))


def _require_dir(path, what: str) -> Path:
    if path is None:
        raise CLIError(f"missing required path: {what}")
    path = Path(path)
    if not path.is_dir():
        raise CLIError(f"{what} {path} does not exist")
    return path


def cmd_synth(args) -> int:
    from .synth import generate_to_disk

    if args.data is None:
        raise CLIError("missing required path: --data (where to write the synthetic dataset)")
    classes = 4 if args.classes is None else args.classes
    meta = generate_to_disk(args.data, num_classes=classes, subjects=args.subjects, trials=args.trials,
                            seed=0 if args.seed is None else args.seed, fingers=args.fingers)
    print(f"wrote {meta['sequences']} sequences to {args.data} "
          f"(nearest-centroid LOSO accuracy {meta['nearest_centroid_loso_accuracy']:.3f})")
    return 0


def cmd_augment(args) -> int:
    from .augment import augment_dataset
    from .harness import load_dataset

    config = _run_config(args)
    _require_dir(config.data, "--data")
    if args.out is None:
        raise CLIError("missing required path: --out")
    dataset = load_dataset(config)
    records = augment_dataset(dataset, config.augment_factor, config.seed)
    out = Path(args.out)
    (out / "records").mkdir(parents=True, exist_ok=True)
    for k, r in enumerate(records):
        np.save(out / "records" / f"{k:07d}.npy", r.sequence.frames)
    with open(out / "provenance.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["record", "file", "origin", "origin_path", "subject", "gesture", "finger", "trial",
                         "technique", "seed", "frames"])
        for k, r in enumerate(records):
            s = r.sequence
            writer.writerow([k, f"records/{k:07d}.npy", r.origin, dataset[r.origin].path, s.subject, s.gesture, s.finger, s.trial,
                             r.technique, r.seed, len(s.frames)])
    print(f"{len(dataset)} sequences x {config.augment_factor} -> {len(records)} records in {out}")
    return 0


def cmd_train(args) -> int:
    from .harness import run_loocv

    config = _run_config(args)
    _require_dir(config.data, "--data")
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(config))
    started = time.perf_counter()
    report = run_loocv(config, out, overwrite=args.overwrite)
    log.info("trained %d fold(s) in %.1f s", len(report["folds"]), time.perf_counter() - started)
    _emit(report, args.format)
    return 0


def cmd_eval(args) -> int:
    from .harness import evaluate_run, write_report

    config = _run_config(args)
    _require_dir(config.data, "--data")
    out = _require_dir(args.out, "--out (run directory with fold snapshots)")
    subjects = None if args.fold is None else [args.fold]
    report = evaluate_run(config, out, subjects)
    write_report(report, out)
    _emit(report, args.format)
    return 0


def cmd_report(args) -> int:
    path = Path(args.report) if args.report else None
    if path is None:
        if args.out is None:
            raise CLIError("missing required path: a report.json or --out run directory")
        path = Path(args.out) / "report.json"
    if path.is_dir():
        path = path / "report.json"
    if not path.is_file():
        raise CLIError(f"report {path} does not exist; run `eval` first")
    _emit(json.loads(path.read_text()), args.format)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    started = time.perf_counter()
    results = run_suite(seed=0 if args.seed is None else args.seed, eps=args.eps)
    elapsed = time.perf_counter() - started
    failing = [k for k, v in results.items() if v >= args.tolerance]
    if args.format == "json":
        print(json.dumps({"tolerance": args.tolerance, "seconds": elapsed, "errors": results}, indent=2))
    else:
        for name, err in results.items():
            print(f"{name:<34} {err:.3e}  {'ok' if err < args.tolerance else 'ABOVE TOLERANCE'}")
        print(f"{len(results) - len(failing)}/{len(results)} components below {args.tolerance:g} "
              f"in {elapsed:.1f} s")
    return 1 if failing and args.strict else 0


def cmd_reproduce(args) -> int:
    from .harness import render_text, run_loocv

    config = _run_config(args, profile=args.profile or "paper")
    _require_dir(config.data, "--data (DHG-14/28 root)")
    report = run_loocv(config, config.out, overwrite=args.overwrite)
    sys.stdout.write(render_text(report))
    got = report["mean_of_folds"]["fusion"]["ensemble"]
    print("\nFusion snapshot ensemble vs. published reference "
          f"(expected within +/-{REFERENCE_SPREAD:g} points):")
    within = True
    for grain, ref in REFERENCE.items():
        value = None if got[grain] is None else 100 * got[grain]
        ok = value is not None and abs(value - ref) <= REFERENCE_SPREAD
        within &= ok
        shown = "   -  " if value is None else f"{value:6.2f}"
        print(f"  {grain:<7} {shown}  reference {ref:6.2f}  {'within' if ok else 'outside'}")
    return 0 if within else 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", help="dataset root (DHG layout)")
    common.add_argument("--out", help="run / output directory")
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--profile", choices=["paper", "desk"], help="defaults profile (default: paper)")
    common.add_argument("--fold", type=int, help="single held-out subject (default: every selected fold)")
    common.add_argument("--seed", type=int)
    common.add_argument("--cycles", type=int, help="warm-restart cycles")
    common.add_argument("--epochs", type=int, help="epochs of the first cycle")
    common.add_argument("--batch", type=int, help="batch size")
    common.add_argument("--temperature", type=float, help="distillation temperature")
    common.add_argument("--classes", type=int,
                        help="label protocol 14 or 28; for `synth`, number of gesture classes")
    common.add_argument("--factor", type=int, help="augmentation factor (originals included)")
    common.add_argument("--format", choices=["json", "csv", "text"], default="text")
    common.add_argument("--overwrite", action="store_true", help="replace existing snapshots")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="gesture-kd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset in the DHG layout")
    p.add_argument("--subjects", type=int, default=6)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--fingers", type=int, choices=[1, 2], default=1)
    p.set_defaults(func=cmd_synth)

    sub.add_parser("augment", parents=[common], help="materialise the augmented training set") \
        .set_defaults(func=cmd_augment)
    sub.add_parser("train", parents=[common], help="train one fold or all folds and write the report") \
        .set_defaults(func=cmd_train)
    sub.add_parser("eval", parents=[common], help="rebuild the report from saved snapshots") \
        .set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="render a saved report")
    p.add_argument("report", nargs="?", help="report.json or run directory (default: --out)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", parents=[common], help="run the finite-difference gradient suite")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    p.add_argument("--strict", action="store_true", help="exit 1 if any component exceeds the tolerance")
    p.set_defaults(func=cmd_gradcheck)

    sub.add_parser("reproduce", parents=[common],
                   help="full 20-fold protocol on DHG-14/28, compared with the published accuracy") \
        .set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except (CLIError, OSError, ValueError, RuntimeError, ArithmeticError, KeyError) as exc:
        print(f"gesture-kd {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
