from .dataset import DatasetError, gen_dataset, render_image, split_dataset
from .grid import (Combination, GridResult, combination_spec,
                   enumerate_combinations, grid_search)
from .metrics import AccuracyMatrix, MetricsError, MetricSummary, metrics
from .report import CSV_FIELDS, ReportRecord, read_csv, report
from .tuning import tune_hyperparams
from .victims import (HarnessError, VictimEntry, VictimRegistry, classify,
                      evaluate, preprocess, select_benign, validate_entry)

__all__ = [
    "DatasetError", "gen_dataset", "render_image", "split_dataset",
    "Combination", "GridResult", "combination_spec", "enumerate_combinations",
    "grid_search", "AccuracyMatrix", "MetricsError", "MetricSummary",
    "metrics", "CSV_FIELDS", "ReportRecord", "read_csv", "report",
    "tune_hyperparams", "HarnessError", "VictimEntry", "VictimRegistry",
    "classify", "evaluate", "preprocess", "select_benign", "validate_entry",
]
