"""Experiment matrix, result store, reports and CLI."""

from .config import ExperimentConfig, load as load_config
from .matrix import Cell, ResultStore, enumerate_cells, run_matrix
from .reports import emit_reports

__all__ = ["Cell", "ExperimentConfig", "ResultStore", "emit_reports", "enumerate_cells", "load_config", "run_matrix"]
