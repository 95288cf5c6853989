"""Dataset-level statistics: moments, porosity-permeability fits,
cross-split comparisons and multivariate outliers."""

from __future__ import annotations

import numpy as np
from scipy import stats

from ..microstructure import chord_statistics
from ..tensor import (batch_anisotropy_ratio, batch_eigenvalues, batch_offdiag_dominance,
                      batch_symmetry_error)

JSD_BINS = 64
MAHALANOBIS_RIDGE = 1e-9


def _r2(pred, truth):
    sst = np.sum((truth - truth.mean()) ** 2)
    return float(1.0 - np.sum((pred - truth) ** 2) / sst) if sst > 0 else float("nan")


def power_law_fit(phi, k) -> dict:
    """K = C phi^n by least squares on log K = log C + n log phi."""
    phi = np.asarray(phi, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if np.any(phi <= 0) or np.any(k <= 0):
        raise ValueError("power-law fit needs positive porosity and permeability")
    A = np.column_stack([np.ones_like(phi), np.log(phi)])
    (logc, n), *_ = np.linalg.lstsq(A, np.log(k), rcond=None)
    C = float(np.exp(logc))
    return {"C": C, "n": float(n), "r2": _r2(C * phi**n, k)}


def kozeny_carman_fit(phi, k) -> dict:
    """K = C phi^3 / (1 - phi)^2; C is the least-squares intercept in log space."""
    phi = np.asarray(phi, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if np.any((phi <= 0) | (phi >= 1)) or np.any(k <= 0):
        raise ValueError("Kozeny-Carman fit needs 0 < phi < 1 and positive permeability")
    shape = phi**3 / (1 - phi) ** 2
    C = float(np.exp(np.mean(np.log(k) - np.log(shape))))
    return {"C": C, "r2": _r2(C * shape, k)}


def ks_two_sample(a, b) -> dict:
    res = stats.ks_2samp(a, b, method="asymp")
    return {"statistic": float(res.statistic), "p_value": float(res.pvalue)}


def jensen_shannon(a, b, bins: int = JSD_BINS) -> float:
    """Base-e JSD between histograms on shared equal-width bins over the pooled range."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
    if lo == hi:
        return 0.0
    edges = np.linspace(lo, hi, bins + 1)
    p = np.histogram(a, edges)[0].astype(np.float64)
    q = np.histogram(b, edges)[0].astype(np.float64)
    p /= p.sum()
    q /= q.sum()
    m = 0.5 * (p + q)

    def kl(x):
        nz = x > 0
        return np.sum(x[nz] * np.log(x[nz] / m[nz]))

    return float(0.5 * kl(p) + 0.5 * kl(q))


def mahalanobis_outliers(x, percentile: float = 99.0) -> dict:
    """Squared-root Mahalanobis distances in the joint space and the rows beyond ``percentile``.

    A singular covariance is regularised with 1e-9 I and flagged.
    """
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False)
    regularized = False
    if np.linalg.matrix_rank(cov) < cov.shape[0]:
        cov = cov + MAHALANOBIS_RIDGE * np.eye(cov.shape[0])
        regularized = True
    diff = x - mu
    d = np.sqrt(np.einsum("ij,jk,ik->i", diff, np.linalg.inv(cov), diff))
    thr = float(np.percentile(d, percentile))
    return {"distances": d, "threshold": thr, "outliers": np.flatnonzero(d > thr).tolist(),
            "regularized": regularized}


def _moments(v) -> dict:
    v = np.asarray(v, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std(ddof=1)), "min": float(v.min()),
            "max": float(v.max()), "skewness": float(stats.skew(v)),
            "kurtosis_excess": float(stats.kurtosis(v))}


def geometry_stats(images, porosity) -> dict:
    porosity = np.asarray(porosity, dtype=np.float64)
    chords = [chord_statistics(im) for im in images]
    q25, q75 = np.percentile(porosity, [25, 75])
    return {
        "n": int(len(porosity)),
        "image_size": int(np.asarray(images).shape[1]),
        "porosity": {**_moments(porosity), "iqr": float(q75 - q25)},
        "chord_h_mean": float(np.mean([c["l_h"] for c in chords])),
        "chord_v_mean": float(np.mean([c["l_v"] for c in chords])),
        "run_length_anisotropy": float(np.mean([c["eta"] for c in chords])),
    }


def population_stats(labels, porosity, images=None) -> dict:
    """The dataset report for one split.  ``labels`` is (N, 4)."""
    labels = np.asarray(labels, dtype=np.float64)
    porosity = np.asarray(porosity, dtype=np.float64)
    if len(labels) < 30:
        raise ValueError("population statistics need at least 30 samples")
    diag = labels[:, [0, 3]].ravel()
    off = labels[:, [1, 2]].ravel()
    sym = batch_symmetry_error(labels)
    lo, hi = batch_eigenvalues(labels)
    ar = batch_anisotropy_ratio(labels)
    delta = batch_offdiag_dominance(labels)
    kbar = labels[:, [0, 3]].mean(axis=1)
    finite_ar = ar[np.isfinite(ar)]
    report = {
        "n": int(len(labels)),
        "porosity": _moments(porosity),
        "components": {c: _moments(labels[:, j]) for j, c in enumerate(("kxx", "kxy", "kyx", "kyy"))},
        "diag": _moments(diag),
        "offdiag": _moments(off),
        "diag_offdiag_std_ratio": float(diag.std(ddof=1) / off.std(ddof=1)) if off.std() > 0 else float("inf"),
        "frobenius": _moments(np.linalg.norm(labels, axis=1)),
        "trace": _moments(labels[:, 0] + labels[:, 3]),
        "determinant": _moments(labels[:, 0] * labels[:, 3] - labels[:, 1] * labels[:, 2]),
        "symmetry_error": {"mean": float(sym.mean()), "max": float(sym.max()),
                           "frac_gt_1e-3": float(np.mean(sym > 1e-3)),
                           "frac_gt_1e-4": float(np.mean(sym > 1e-4))},
        "pd_fraction": float(np.mean(lo > 0)),
        "lambda_min": {"mean": float(lo.mean()), "min": float(lo.min()), "p5": float(np.percentile(lo, 5))},
        "lambda_max": {"mean": float(hi.mean()), "max": float(hi.max()), "p95": float(np.percentile(hi, 95))},
        "anisotropy_ratio": {
            "median": float(np.median(finite_ar)), "p90": float(np.percentile(finite_ar, 90)),
            "p95": float(np.percentile(finite_ar, 95)),
            "frac_gt_2": float(np.mean(ar > 2)), "frac_gt_5": float(np.mean(ar > 5)),
            "frac_gt_10": float(np.mean(ar > 10)),
        },
        "offdiag_dominance": {"mean": float(delta.mean()), "max": float(delta.max())},
        "phi_perm": {
            "kozeny_carman": kozeny_carman_fit(porosity, kbar),
            "power_law": power_law_fit(porosity, kbar),
            "spearman": float(stats.spearmanr(porosity, kbar)[0]),
        },
    }
    mah = mahalanobis_outliers(labels)
    report["mahalanobis"] = {"threshold": mah["threshold"], "n_outliers": len(mah["outliers"]),
                             "outliers": mah["outliers"], "regularized": mah["regularized"]}
    if images is not None:
        report["geometry"] = geometry_stats(images, porosity)
    return report


def cross_split_stats(splits: dict) -> list[dict]:
    """KS and JSD for every pair of splits on kxx, kxy, kyx, kyy and porosity.

    ``splits`` maps a name to ``(labels, porosity)``.
    """
    names = list(splits)
    rows = []
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            (la, pa), (lb, pb) = splits[names[i]], splits[names[j]]
            cols = {"kxx": (la[:, 0], lb[:, 0]), "kxy": (la[:, 1], lb[:, 1]),
                    "kyx": (la[:, 2], lb[:, 2]), "kyy": (la[:, 3], lb[:, 3]), "phi": (pa, pb)}
            for var, (a, b) in cols.items():
                ks = ks_two_sample(a, b)
                rows.append({"pair": f"{names[i]} vs {names[j]}", "variable": var,
                             "ks_stat": ks["statistic"], "p_value": ks["p_value"],
                             "jsd": jensen_shannon(a, b)})
    return rows
