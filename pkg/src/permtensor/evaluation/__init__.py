"""Metrics, bootstrap intervals, population statistics and uncertainty tools."""

from .anisotropy import anisotropy_stratified
from .bootstrap import BcaResult, BootConfig, bca_interval, bootstrap_table
from .metrics import (agreement_metrics, component_r2, diag_r2, evaluate_predictions, mae,
                      offdiag_r2, positivity_fraction, r2, relative_errors, rmse,
                      variance_weighted_r2)
from .population import (cross_split_stats, jensen_shannon, kozeny_carman_fit, ks_two_sample,
                         mahalanobis_outliers, population_stats, power_law_fit)
from .uncertainty import CALIBRATION_LEVELS, UqConfig, calibration, mc_dropout, tta_predict

__all__ = [
    "BcaResult", "BootConfig", "CALIBRATION_LEVELS", "UqConfig", "agreement_metrics",
    "anisotropy_stratified", "bca_interval", "bootstrap_table", "calibration", "component_r2",
    "cross_split_stats", "diag_r2", "evaluate_predictions", "jensen_shannon",
    "kozeny_carman_fit", "ks_two_sample", "mae", "mahalanobis_outliers", "mc_dropout",
    "offdiag_r2", "population_stats", "positivity_fraction", "power_law_fit", "r2",
    "relative_errors", "rmse", "tta_predict", "variance_weighted_r2",
]
