"""Command-line entry point.

Commands: train, calibrate, eval, sweep, infer, alpha-curve, histogram,
mac-report. Logs go to stderr; data (reports, CSV) to stdout or --out files.
Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import data as data_mod
from . import calibration, evaluation, serialization, training
from .cascade import (CascadeModel, CascadeSpec, PRESETS, SpecValidationError,
                      ThresholdVector, build_cascade, ci_infer, mac_table,
                      preset_spec)
from .nn import ShapeError

DATASET_SHAPES = {"mnist": (1, 28, 28), "fashion": (1, 28, 28),
                  "cifar10": (3, 32, 32)}
N_CLASSES = 10


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _print_config(args: argparse.Namespace) -> None:
    pairs = sorted(vars(args).items())
    _log("config: " + " ".join(f"{k}={v}" for k, v in pairs if k != "func"))


@contextmanager
def _out_stream(path: Optional[str]):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8") as fh:
            yield fh


def _resolve_data_dir(args) -> str:
    if args.data_dir:
        return args.data_dir
    return os.environ.get("CSCD_DATA_DIR", "data")


def _parse_calib_split(text: str) -> Tuple[str, float]:
    if text == "train":
        return "train", 0.0
    if text.startswith("holdout:"):
        frac = float(text.split(":", 1)[1])
        if not 0.0 < frac < 1.0:
            raise ValueError(f"holdout fraction must be in (0, 1), got {frac}")
        return "holdout", frac
    raise ValueError(f"--calib-split must be 'train' or 'holdout:<frac>', got {text!r}")


def _load_splits(args) -> Tuple[data_mod.Dataset, Optional[data_mod.Dataset],
                                data_mod.Dataset]:
    """Load (train, calibration-or-None, test), standardized on the train part.

    With --calib-split holdout:f the raw training set is split first so the
    held-out part never contributes to standardization statistics or training.
    """
    train_raw, test_raw = data_mod.load_named_dataset(args.dataset,
                                                      _resolve_data_dir(args))
    mode, frac = _parse_calib_split(getattr(args, "calib_split", "train"))
    if mode == "holdout":
        train_raw, calib_raw = data_mod.split(train_raw, (1.0 - frac, frac),
                                              args.seed, ("train", "calib"))
        train, calib, test = data_mod.standardize(train_raw, calib_raw, test_raw)
        return train, calib, test
    train, test = data_mod.standardize(train_raw, test_raw)
    return train, None, test


def _load_model(path: str) -> CascadeModel:
    if not Path(path).is_file():
        raise FileNotFoundError(f"model file {path} does not exist")
    return serialization.load_model(path)


def _resolve_spec(args, input_shape, n_c) -> CascadeSpec:
    name_or_path = getattr(args, "spec", None) or getattr(args, "preset", None) \
        or "small"
    if name_or_path in PRESETS:
        return preset_spec(name_or_path, input_shape, n_c,
                           enhanced=not getattr(args, "plain_classifiers", False),
                           batch_norm=not getattr(args, "no_batch_norm", False))
    path = Path(name_or_path)
    if path.is_file():
        return serialization.spec_from_json(path.read_text(encoding="utf-8"))
    raise ValueError(f"--spec {name_or_path!r} is neither a preset "
                     f"({sorted(PRESETS)}) nor a file")


def _resolve_thresholds(text: str, n_m: int) -> ThresholdVector:
    if text == "zeros":
        return ThresholdVector.zeros(n_m)
    if text == "disabled":
        return ThresholdVector.last_only(n_m)
    if not Path(text).is_file():
        raise FileNotFoundError(f"threshold file {text} does not exist")
    return serialization.load_thresholds(text, n_m)


def _calib_set(args, train, calib) -> data_mod.Dataset:
    return calib if calib is not None else train


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    train, _, test = _load_splits(args)
    if args.limit_train is not None:
        if args.limit_train < 1:
            raise ValueError(f"--limit-train must be >= 1, got {args.limit_train}")
        train = train.subset(np.arange(min(args.limit_train, train.n)))
    spec = _resolve_spec(args, train.images.shape[1:], N_CLASSES)
    model = build_cascade(spec, args.seed)
    cfg = training.TrainConfig(
        n_e=args.epochs, batch_size=args.batch, learning_rate=args.lr,
        momentum=args.momentum, seed=args.seed, augment=args.augment)
    _log(f"training on {train.n} samples, evaluating on {test.n}")
    model, report = training.ci_bt_train(model, train, cfg, eval_set=test,
                                         log=_log, train_acc_limit=10000)
    serialization.save_model(model, args.out)
    _log(f"model written to {args.out}")
    for line in report.summary_lines():
        print(line)
    return 0


def cmd_calibrate(args) -> int:
    model = _load_model(args.model)
    train, calib, _ = _load_splits(args)
    ds = _calib_set(args, train, calib)
    vec, result = calibration.calibrate(model, ds.images, ds.labels, args.epsilon)
    serialization.save_thresholds(vec, args.out)
    _log(f"thresholds written to {args.out}")
    for line in result.report_lines():
        print(line)
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    _, _, test = _load_splits(args)
    vec = _resolve_thresholds(args.thresholds, model.n_m)
    report = evaluation.evaluate_cascade(model, vec, test)
    for line in report.report_lines():
        print(line)
    return 0


def cmd_sweep(args) -> int:
    model = _load_model(args.model)
    train, calib, test = _load_splits(args)
    epsilons = [float(tok) for tok in args.epsilons.split(",") if tok.strip()]
    if not epsilons:
        raise ValueError(f"--epsilons {args.epsilons!r} parses to an empty list")
    ds = _calib_set(args, train, calib)
    points = evaluation.sweep_epsilon(model, ds, test, epsilons)
    with _out_stream(args.out) as out:
        evaluation.write_sweep_csv([p for p, _ in points], out)
    for point, vec in points:
        _log(f"epsilon={point.epsilon:.9g} thresholds={tuple(vec.values)} "
             f"accuracy={point.accuracy:.9g} speedup={point.speedup:.9g}")
    return 0


def cmd_infer(args) -> int:
    model = _load_model(args.model)
    _, _, test = _load_splits(args)
    vec = _resolve_thresholds(args.thresholds, model.n_m)
    if not 0 <= args.index < test.n:
        raise ValueError(f"--index {args.index} out of range [0, {test.n})")
    trace = ci_infer(model, vec, test.images[args.index],
                     record_outputs=args.record)
    print(f"index: {args.index}")
    print(f"true label: {test.labels[args.index]}")
    print(f"predicted class: {trace.predicted_class}")
    print(f"exit component: {trace.exit_component}")
    print(f"confidence: {trace.confidence:.9g}")
    print(f"macs used: {trace.macs_used}")
    if trace.per_component_outputs:
        for m, out in enumerate(trace.per_component_outputs):
            print(f"component {m}: out={out.out} delta={out.delta:.9g}")
    return 0


def cmd_alpha_curve(args) -> int:
    model = _load_model(args.model)
    _, _, test = _load_splits(args)
    if not 0 <= args.component < model.n_m:
        raise ValueError(f"--component {args.component} out of range "
                         f"[0, {model.n_m})")
    samples = evaluation.alpha_curve(model, args.component, test, args.grid)
    with _out_stream(args.out) as out:
        evaluation.write_alpha_csv(samples, out)
    return 0


def cmd_histogram(args) -> int:
    model = _load_model(args.model)
    _, _, test = _load_splits(args)
    hist = evaluation.confidence_histogram(model, test, args.bins)
    with _out_stream(args.out) as out:
        evaluation.write_hist_csv(hist, out)
    return 0


def cmd_mac_report(args) -> int:
    if args.model:
        model = _load_model(args.model)
        spec = model.spec
    else:
        shape = DATASET_SHAPES[args.dataset]
        spec = _resolve_spec(args, shape, N_CLASSES)
    table = mac_table(spec)
    print(f"input shape: {spec.input_shape}")
    for m in range(spec.n_m):
        print(f"component {m}: trunk={table.trunk_macs[m]} "
              f"classifier={table.classifier_macs[m]} "
              f"cumulative={table.cumulative_macs(m)}")
    print(f"full network (trunks + final classifier): {table.full_network_macs}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cscd",
        description="Train, calibrate and run early-termination cascades of "
                    "convolutional classifiers.")
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--data-dir", default=None,
                        help="dataset root (default: $CSCD_DATA_DIR or ./data)")
    shared.add_argument("--dataset", choices=sorted(DATASET_SHAPES),
                        default="fashion")
    shared.add_argument("--seed", type=int, default=0)
    shared.add_argument("--threads", type=int, default=1,
                        help="accepted for interface stability; execution is "
                             "sequential and results never depend on it")
    sub = parser.add_subparsers(dest="command", required=True)

    spec_flags = argparse.ArgumentParser(add_help=False)
    spec_flags.add_argument("--spec", default=None,
                            help="preset name or architecture JSON file")
    spec_flags.add_argument("--preset", choices=sorted(PRESETS), default=None)
    spec_flags.add_argument("--plain-classifiers", action="store_true",
                            help="branch heads without the 1x1 expansion conv")
    spec_flags.add_argument("--no-batch-norm", action="store_true")

    p = sub.add_parser("train", parents=[shared, spec_flags],
                       help="backtrack-train a cascade")
    p.add_argument("--epochs", type=int, default=4, help="n_e per classifier")
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--augment", action="store_true")
    p.add_argument("--limit-train", type=int, default=None,
                   help="train on the first N samples only")
    p.add_argument("--calib-split", default="train",
                   help="'train' or 'holdout:<frac>' kept out of training")
    p.add_argument("--out", default="model.cscd")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", parents=[shared],
                       help="compute confidence thresholds for an epsilon")
    p.add_argument("--model", required=True)
    p.add_argument("--epsilon", type=float, required=True,
                   help="tolerated accuracy drop as a fraction, e.g. 0.02")
    p.add_argument("--calib-split", default="train")
    p.add_argument("--out", default="thresholds.txt")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", parents=[shared],
                       help="accuracy/MACs/speedup of a calibrated cascade")
    p.add_argument("--model", required=True)
    p.add_argument("--thresholds", required=True,
                   help="threshold file, or 'zeros' / 'disabled'")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[shared],
                       help="calibrate+evaluate across an epsilon list")
    p.add_argument("--model", required=True)
    p.add_argument("--epsilons", required=True,
                   help="comma-separated fractions, e.g. 0,0.01,0.02")
    p.add_argument("--calib-split", default="train")
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("infer", parents=[shared],
                       help="single-input early-termination run")
    p.add_argument("--model", required=True)
    p.add_argument("--thresholds", required=True)
    p.add_argument("--index", type=int, default=0, help="test-set input index")
    p.add_argument("--record", action="store_true",
                   help="print every consulted classifier's output")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("alpha-curve", parents=[shared],
                       help="accuracy-over-threshold curve for one component")
    p.add_argument("--model", required=True)
    p.add_argument("--component", type=int, required=True)
    p.add_argument("--grid", type=int, default=50)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_alpha_curve)

    p = sub.add_parser("histogram", parents=[shared],
                       help="confidence histogram per component")
    p.add_argument("--model", required=True)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_histogram)

    p = sub.add_parser("mac-report", parents=[shared, spec_flags],
                       help="exact MAC table of a model or preset")
    p.add_argument("--model", default=None)
    p.set_defaults(func=cmd_mac_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        _log(f"error: --threads must be >= 1, got {args.threads}")
        return 2
    _print_config(args)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        _log(f"error: {e}")
        return 2
    except training.NumericError as e:
        _log(f"numeric failure: {e}")
        return 3
    except (ValueError, SpecValidationError, ShapeError) as e:
        _log(f"error: {e}")
        return 2
    except (data_mod.DataError, serialization.PersistenceError, OSError) as e:
        _log(f"I/O failure: {e}")
        return 4


if __name__ == "__main__":
    sys.exit(main())
