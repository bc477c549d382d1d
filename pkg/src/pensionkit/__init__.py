"""Pension design welfare engine with a synthetic-data estimator harness."""

__version__ = "0.1.0"
