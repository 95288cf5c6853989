"""Metrics stratified by the ground-truth eigenvalue anisotropy ratio."""

from __future__ import annotations

import numpy as np

from ..tensor import batch_anisotropy_ratio
from .metrics import DIAG, OFFDIAG, r2, relative_errors

HIGH_AR_FRACTION = 0.125


def _group_r2(pred, truth, cols):
    vals = []
    for j in cols:
        try:
            vals.append(r2(pred[:, j], truth[:, j]))
        except ValueError:
            vals.append(np.nan)
    return float(np.mean(vals))


def _bin_metrics(pred, truth, ar):
    d = _group_r2(pred, truth, DIAG)
    o = _group_r2(pred, truth, OFFDIAG)
    rr = [relative_errors(pred[:, j], truth[:, j])["rrmse"] for j in range(4)]
    return {"n": int(len(pred)), "ar_min": float(ar.min()), "ar_max": float(ar.max()),
            "ar_median": float(np.median(ar)), "r2_diag": d, "r2_offdiag": o,
            "delta_r2": d - o, "rrmse_diag": float(np.mean([rr[j] for j in DIAG])),
            "rrmse_offdiag": float(np.mean([rr[j] for j in OFFDIAG]))}


def equal_population_bins(n: int, n_bins: int) -> list[np.ndarray]:
    """Index ranges into a sorted array; the first ``n % n_bins`` bins get one extra."""
    base, extra = divmod(n, n_bins)
    sizes = [base + (1 if i < extra else 0) for i in range(n_bins)]
    edges = np.concatenate([[0], np.cumsum(sizes)])
    return [np.arange(edges[i], edges[i + 1]) for i in range(n_bins)]


def anisotropy_stratified(pred, truth, n_bins: int = 10) -> dict:
    """Equal-population bins by ground-truth AR, plus the top-12.5% high-AR subset."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    n = len(truth)
    if n < 10 * n_bins:
        raise ValueError(f"{n_bins} bins need at least {10 * n_bins} samples, got {n}")
    ar = batch_anisotropy_ratio(truth)
    if np.ptp(ar) == 0:
        return {"bins": [_bin_metrics(pred, truth, ar)], "degenerate": True, "high_ar": None}
    order = np.argsort(ar, kind="stable")
    bins = [_bin_metrics(pred[order[ix]], truth[order[ix]], ar[order[ix]])
            for ix in equal_population_bins(n, n_bins)]
    top = order[n - max(2, int(round(HIGH_AR_FRACTION * n))):]
    return {"bins": bins, "degenerate": False,
            "high_ar": _bin_metrics(pred[top], truth[top], ar[top])}
