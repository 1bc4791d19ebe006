"""Metrics, persistence, experiment orchestration, and the command line."""

from .metrics import MetricResult, nmse, nmsqe, to_db

__all__ = ["MetricResult", "nmse", "nmsqe", "to_db"]
