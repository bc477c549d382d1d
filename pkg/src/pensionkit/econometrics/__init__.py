"""Regression kernels, quasi-experimental designs and mortality fits."""

from .kernels import (Coefficient, EstimateTable, EstimationError, EventStudyResult, RegressionSpec,
                      WeakInstrumentWarning, event_study, ols_fe, tsls)
from .mortality import life_expectancy, mortality_life_expectancy, survival_curve

__all__ = ["Coefficient", "EstimateTable", "EstimationError", "EventStudyResult", "RegressionSpec",
           "WeakInstrumentWarning", "event_study", "ols_fe", "tsls", "life_expectancy",
           "mortality_life_expectancy", "survival_curve"]
