"""Regression metrics for the four tensor components.

Relative metrics (RRMSE, MAPE, NRMSE) are returned as fractions; multiply
by 100 for percent.  Arrays of predictions and truths are ``(N, 4)`` with
columns ``[kxx, kxy, kyx, kyy]``.
"""

from __future__ import annotations

import numpy as np
from scipy import stats

from ..tensor import batch_anisotropy_ratio

COMPONENTS = ("kxx", "kxy", "kyx", "kyy")
DIAG = (0, 3)
OFFDIAG = (1, 2)
MAPE_EPS = 1e-8
NRMSE_EPS = 1e-8


def _pair(pred, truth, min_len=2):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"pred {pred.shape} and truth {truth.shape} differ")
    if len(truth) < min_len:
        raise ValueError(f"need at least {min_len} samples, got {len(truth)}")
    return pred, truth


def r2(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    sst = np.sum((truth - truth.mean()) ** 2)
    if sst == 0:
        raise ValueError("R^2 is undefined for constant truth")
    return float(1.0 - np.sum((pred - truth) ** 2) / sst)


def rmse(pred, truth) -> float:
    pred, truth = _pair(pred, truth, 1)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def mae(pred, truth) -> float:
    pred, truth = _pair(pred, truth, 1)
    return float(np.mean(np.abs(pred - truth)))


def component_r2(pred, truth) -> np.ndarray:
    pred, truth = _pair(pred, truth)
    return np.array([r2(pred[:, j], truth[:, j]) for j in range(pred.shape[1])])


def variance_weighted_r2(pred, truth) -> float:
    """Pooled ``1 - sum(SSE) / sum(SST)`` over all components."""
    pred, truth = _pair(pred, truth)
    sst = np.sum((truth - truth.mean(axis=0)) ** 2)
    if sst == 0:
        raise ValueError("variance-weighted R^2 is undefined when every component is constant")
    return float(1.0 - np.sum((pred - truth) ** 2) / sst)


def diag_r2(pred, truth) -> float:
    c = component_r2(pred, truth)
    return float(np.mean(c[list(DIAG)]))


def offdiag_r2(pred, truth) -> float:
    c = component_r2(pred, truth)
    return float(np.mean(c[list(OFFDIAG)]))


def relative_errors(pred, truth) -> dict:
    """RRMSE (by mean |truth|), MAPE (with 1e-8 guard) and NRMSE (by range + 1e-8)."""
    pred, truth = _pair(pred, truth, 1)
    e = rmse(pred, truth)
    scale = np.mean(np.abs(truth))
    return {
        "rrmse": float(e / scale) if scale > 0 else float("inf"),
        "mape": float(np.mean(np.abs(pred - truth) / (np.abs(truth) + MAPE_EPS))),
        "nrmse": float(e / (truth.max() - truth.min() + NRMSE_EPS)),
    }


def agreement_metrics(pred, truth) -> dict:
    """Willmott d, KGE (with r, alpha, beta), Pearson r and Spearman rho.

    A metric whose formula divides by zero is reported as NaN and named in
    ``undefined``.
    """
    pred, truth = _pair(pred, truth, 3)
    undefined = []
    ybar = truth.mean()
    denom = np.sum((np.abs(pred - ybar) + np.abs(truth - ybar)) ** 2)
    if denom > 0:
        d = 1.0 - np.sum((truth - pred) ** 2) / denom
    else:
        d = np.nan
        undefined.append("willmott_d")
    sp, st = pred.std(), truth.std()
    if sp > 0 and st > 0:
        r = float(np.corrcoef(pred, truth)[0, 1])
        rho = float(stats.spearmanr(pred, truth)[0])
    else:
        r = rho = np.nan
        undefined += ["pearson", "spearman"]
    alpha = sp / st if st > 0 else np.nan
    beta = pred.mean() / truth.mean() if truth.mean() != 0 else np.nan
    kge = 1.0 - np.sqrt((r - 1) ** 2 + (alpha - 1) ** 2 + (beta - 1) ** 2)
    if np.isnan(kge):
        undefined.append("kge")
    return {"willmott_d": float(d), "kge": float(kge), "kge_r": float(r),
            "kge_alpha": float(alpha), "kge_beta": float(beta),
            "pearson": float(r), "spearman": float(rho), "undefined": undefined}


def eps_sym(pred) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    return np.abs(pred[:, 1] - pred[:, 2])


def positivity_fraction(pred) -> float:
    """Fraction of samples whose two diagonal components are both > 0."""
    pred = np.asarray(pred, dtype=np.float64)
    return float(np.mean((pred[:, 0] > 0) & (pred[:, 3] > 0)))


def high_ar_mask(truth, top_fraction: float = 0.125) -> np.ndarray:
    ar = batch_anisotropy_ratio(truth)
    n_top = max(1, int(round(top_fraction * len(ar))))
    order = np.argsort(-ar, kind="stable")
    mask = np.zeros(len(ar), dtype=bool)
    mask[order[:n_top]] = True
    return mask


def _safe(fn, *args):
    try:
        return fn(*args)
    except ValueError:
        return float("nan")


def evaluate_predictions(pred, truth) -> dict:
    """Full report: per-component metrics plus aggregates."""
    pred, truth = _pair(pred, truth)
    per = {}
    for j, name in enumerate(COMPONENTS):
        p, t = pred[:, j], truth[:, j]
        per[name] = {"r2": _safe(r2, p, t), "rmse": rmse(p, t), "mae": mae(p, t),
                     **relative_errors(p, t)}
        if len(p) >= 3:
            per[name].update(agreement_metrics(p, t))
    comp = np.array([per[c]["r2"] for c in COMPONENTS])
    d_r2 = float(np.mean(comp[list(DIAG)]))
    o_r2 = float(np.mean(comp[list(OFFDIAG)]))
    agg = {
        "r2_component_avg": float(np.mean(comp)),
        "r2_variance_weighted": _safe(variance_weighted_r2, pred, truth),
        "r2_diag": d_r2,
        "r2_offdiag": o_r2,
        "delta_r2": d_r2 - o_r2,
        "rmse": rmse(pred, truth),
        "rrmse": float(np.mean([per[c]["rrmse"] for c in COMPONENTS])),
        "eps_sym_mean": float(eps_sym(pred).mean()),
        "positivity_fraction": positivity_fraction(pred),
        "n": int(len(pred)),
    }
    hi = high_ar_mask(truth)
    if hi.sum() >= 2:
        agg["delta_r2_high_ar"] = _safe(lambda: diag_r2(pred[hi], truth[hi])
                                         - offdiag_r2(pred[hi], truth[hi]))
    return {"components": per, "aggregate": agg}
