"""Datasets, experiment protocols, curves and reports."""

from divdrop.evaluation.curves import (
    CurvePoints,
    count_vs_uncertainty_curve,
    exceedance,
    percentile,
    ue_accuracy_curve,
)
from divdrop.evaluation.data import CsvSchema, SplitPlan, Standardizer, TabularDataset, load_csv, make_synthetic, save_csv
from divdrop.evaluation.protocols import (
    ARCHITECTURES,
    ModelConfig,
    ProtocolConfig,
    run_classification_experiment,
    run_convergence_experiment,
    run_convergence_trace,
    run_ood_regression,
    run_regression_experiment,
)
from divdrop.evaluation.report import ExperimentReport, summarize

__all__ = [
    "ARCHITECTURES",
    "CsvSchema",
    "CurvePoints",
    "ExperimentReport",
    "ModelConfig",
    "ProtocolConfig",
    "SplitPlan",
    "Standardizer",
    "TabularDataset",
    "count_vs_uncertainty_curve",
    "exceedance",
    "load_csv",
    "make_synthetic",
    "percentile",
    "run_classification_experiment",
    "run_convergence_experiment",
    "run_convergence_trace",
    "run_ood_regression",
    "run_regression_experiment",
    "save_csv",
    "summarize",
    "ue_accuracy_curve",
]
