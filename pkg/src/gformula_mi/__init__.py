"""Parametric G-formula by Monte-Carlo simulation and by synthetic multiple imputation."""

__version__ = "0.1.0"

from .data import Column, LongitudinalTable, Regime, Schema, augment, load_csv, missingness_pattern, write_csv
from .exceptions import EstimationError, GFormulaError, ModelFitError, NegativeVarianceError, ValidationError
from .gform_mc import bootstrap, estimate_contrast_mc, simulate_regime
from .gform_mi import contrast, extend, impute_synthetic, point_estimate
from .mice import ChainConfig, apply_mcar, chained_impute, two_stage_synthetic
from .models import DesignSpec, Family, fit, posterior_draw, predictive_draw, sequential_spec
from .pooling import PooledResult, pool, pool_contrast, pool_with_extension, prob_negative

__all__ = [
    "Column", "LongitudinalTable", "Regime", "Schema", "augment", "load_csv", "missingness_pattern", "write_csv",
    "EstimationError", "GFormulaError", "ModelFitError", "NegativeVarianceError", "ValidationError",
    "bootstrap", "estimate_contrast_mc", "simulate_regime",
    "contrast", "extend", "impute_synthetic", "point_estimate",
    "ChainConfig", "apply_mcar", "chained_impute", "two_stage_synthetic",
    "DesignSpec", "Family", "fit", "posterior_draw", "predictive_draw", "sequential_spec",
    "PooledResult", "pool", "pool_contrast", "pool_with_extension", "prob_negative",
]
