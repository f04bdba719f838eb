"""Experiment configuration, drivers, result records and plots."""

from .config import EXPERIMENTS, ExperimentConfig, apply_overrides, default_config
from .records import CSV_HEADER, ResultStore, TrialRecord, read_csv, write_csv
from .runner import RUNNERS, derive_seed, run

__all__ = ["CSV_HEADER", "EXPERIMENTS", "ExperimentConfig", "RUNNERS", "ResultStore", "TrialRecord",
           "apply_overrides", "default_config", "derive_seed", "read_csv", "run", "write_csv"]
