"""Cascades of convolutional classifiers with confidence-based early exits.

Build a cascade, backtrack-train it, calibrate per-component confidence
thresholds for a tolerated accuracy drop, and run inference that stops at
the first sufficiently confident classifier, with exact MAC accounting.
"""

from .cascade import (DISABLED, CascadeModel, CascadeSpec, ClassifierOutput,
                      ComponentSpec, InferenceTrace, MacTable,
                      SpecValidationError, ThresholdVector, batch_infer,
                      build_cascade, cascade_logits, ci_infer,
                      component_forward, custom_spec, mac_table, preset_spec)
from .calibration import (CalibrationResult, CalibrationTable, build_table,
                          build_tables, calibrate, thresholds_from_tables)
from .data import (Dataset, augment, load_cifar_binary, load_idx,
                   load_named_dataset, split, standardize)
from .evaluation import (AlphaSample, CascadeEvalReport, CurvePoint,
                         HistogramBin, alpha_curve, cascade_outputs,
                         confidence_histogram, evaluate_cascade, sweep_epsilon)
from .serialization import (load_model, load_thresholds, save_model,
                            save_thresholds)
from .training import (NumericError, TrainConfig, TrainReport, ci_bt_train,
                       evaluate, evaluate_all)

__version__ = "0.1.0"

__all__ = [
    "DISABLED", "CascadeModel", "CascadeSpec", "ClassifierOutput",
    "ComponentSpec", "InferenceTrace", "MacTable", "SpecValidationError",
    "ThresholdVector", "batch_infer", "build_cascade", "cascade_logits",
    "ci_infer", "component_forward", "custom_spec", "mac_table", "preset_spec",
    "CalibrationResult", "CalibrationTable", "build_table", "build_tables",
    "calibrate", "thresholds_from_tables",
    "Dataset", "augment", "load_cifar_binary", "load_idx",
    "load_named_dataset", "split", "standardize",
    "AlphaSample", "CascadeEvalReport", "CurvePoint", "HistogramBin",
    "alpha_curve", "cascade_outputs", "confidence_histogram",
    "evaluate_cascade", "sweep_epsilon",
    "load_model", "load_thresholds", "save_model", "save_thresholds",
    "NumericError", "TrainConfig", "TrainReport", "ci_bt_train", "evaluate",
    "evaluate_all",
    "__version__",
]
