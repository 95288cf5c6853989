"""MC-dropout uncertainty, coverage calibration and the D4 test-time ensemble."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .. import d4

CALIBRATION_LEVELS = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2)) + (0.99,)


@dataclass(frozen=True)
class UqConfig:
    T: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("MC-dropout needs T >= 2 passes")


def shifted_mean_std(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population sd over axis 0, accumulated relative to the first
    sample so identical samples give sd = 0 exactly."""
    samples = np.asarray(samples, dtype=np.float64)
    dev = samples - samples[0]
    mu = samples[0] + dev.mean(axis=0)
    return mu, np.sqrt(np.mean((samples - mu) ** 2, axis=0))


def mc_dropout(model, images, phi, cfg: UqConfig = UqConfig()) -> dict:
    """T stochastic passes with dropout active; pass t is seeded by (seed, t)."""
    outs = np.stack([model.forward(images, phi, train=True, seed=(cfg.seed, t)).data
                     for t in range(cfg.T)])
    mu, sd = shifted_mean_std(outs)
    return {"mean": mu, "sd": sd, "samples": outs}


def calibration(mu, sd, truth, levels=CALIBRATION_LEVELS) -> dict:
    """Empirical coverage of mu +/- z sd per nominal level, and the mean
    absolute nominal-vs-empirical gap (MCE)."""
    mu, sd, truth = (np.asarray(a, dtype=np.float64) for a in (mu, sd, truth))
    if np.any(sd < 0):
        raise ValueError("standard deviations must be non-negative")
    err = np.abs(truth - mu)
    curve = []
    for level in levels:
        z = stats.norm.ppf(0.5 + level / 2)
        curve.append((float(level), float(np.mean(err <= z * sd))))
    gaps = [abs(n - e) for n, e in curve]
    flat_sd, flat_err = sd.ravel(), err.ravel()
    if flat_sd.std() > 0 and flat_err.std() > 0:
        rho = float(stats.spearmanr(flat_sd, flat_err)[0])
    else:
        rho = float("nan")
    return {"curve": curve, "mce": float(np.mean(gaps)), "uncertainty_error_spearman": rho}


def tta_predict(model, images, phi) -> np.ndarray:
    """Average over the eight D4 elements of g^-1 . f(g . image).

    Works on a single image (returns 4 values) or a batch (returns (B, 4)).
    """
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 2
    if single:
        images = images[None]
    stacked = np.moveaxis(images, 0, -1)  # (H, W, B): batch rides along
    total = np.zeros((len(images), 4))
    for g in d4.ELEMENTS:
        view = np.moveaxis(d4.transform_image(stacked, g), -1, 0)
        pred = model.predict(view, phi)
        total += d4.transform_vectors(pred, d4.inverse(g))
    out = total / len(d4.ELEMENTS)
    return out[0] if single else out
