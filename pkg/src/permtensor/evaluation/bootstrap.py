"""Bias-corrected (and optionally accelerated) bootstrap intervals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class BootConfig:
    B: int = 1000
    alpha: float = 0.05
    seed: int = 42
    acceleration: float = 0.0

    def __post_init__(self):
        if self.B < 2:
            raise ValueError("B must be at least 2")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass
class BcaResult:
    lo: float
    hi: float
    boot_mean: float
    boot_sd: float
    observed: float
    z0: float
    levels: tuple
    degenerate: bool = False


def bca_levels(z0: float, a: float, alpha: float) -> tuple[float, float]:
    """Percentile levels of the BCa interval.  With z0 = a = 0 these are
    exactly ``alpha/2`` and ``1 - alpha/2``."""
    if z0 == 0.0 and a == 0.0:
        return alpha / 2, 1 - alpha / 2
    z = stats.norm.ppf(1 - alpha / 2)
    lo = stats.norm.cdf(z0 + (z0 - z) / (1 - a * (z0 - z)))
    hi = stats.norm.cdf(z0 + (z0 + z) / (1 - a * (z0 + z)))
    return float(lo), float(hi)


def bootstrap_replicates(metric_fn, pred, truth, B: int, seed: int) -> np.ndarray:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    n = len(pred)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(B, n))
    return np.array([metric_fn(pred[i], truth[i]) for i in idx], dtype=np.float64)


def bca_interval(metric_fn, pred, truth, cfg: BootConfig = BootConfig()) -> BcaResult:
    """Resample rows with replacement ``cfg.B`` times and take BCa quantiles.

    ``metric_fn(pred, truth)`` returns a scalar.  A replicate distribution
    with no spread collapses the interval to the observed value and sets
    ``degenerate``.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if len(pred) < 10:
        raise ValueError("bootstrap needs at least 10 samples")
    observed = float(metric_fn(pred, truth))
    reps = bootstrap_replicates(metric_fn, pred, truth, cfg.B, cfg.seed)
    if np.all(reps == reps[0]):
        return BcaResult(observed, observed, float(reps[0]), 0.0, observed, 0.0,
                         (cfg.alpha / 2, 1 - cfg.alpha / 2), degenerate=True)
    frac = float(np.mean(reps < observed))
    z0 = float(stats.norm.ppf(frac)) if frac != 0.5 else 0.0
    levels = bca_levels(z0, cfg.acceleration, cfg.alpha)
    lo, hi = np.quantile(reps, levels)
    return BcaResult(float(lo), float(hi), float(reps.mean()), float(reps.std(ddof=1)),
                     observed, z0, levels)


def bootstrap_table(pred, truth, metric_fns: dict, cfg: BootConfig = BootConfig()) -> list[dict]:
    """One row per metric: observed value, interval, bootstrap mean and sd."""
    rows = []
    for name, fn in metric_fns.items():
        res = bca_interval(fn, pred, truth, cfg)
        rows.append({"metric": name, "observed": res.observed, "ci_lo": res.lo,
                     "ci_hi": res.hi, "boot_mean": res.boot_mean, "boot_sd": res.boot_sd,
                     "z0": res.z0, "degenerate": res.degenerate})
    return rows
