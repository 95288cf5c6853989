"""Synthetic binary porous media and their geometric statistics.

Images are ``uint8`` arrays with 1 = solid grain and 0 = pore.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

GRADIENT_GUARD = 1e-12


def check_binary(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D raster, got shape {img.shape}")
    if not np.isin(img, (0, 1)).all():
        raise ValueError("image is not strictly binary")
    return img.astype(np.uint8, copy=False)


def porosity(img) -> float:
    img = check_binary(img)
    return 1.0 - float(img.mean())


def generate_microstructure(seed: int, size: int, correlation_length: float,
                            target_porosity: float) -> np.ndarray:
    """Threshold a periodic Gaussian random field at the porosity quantile.

    White noise is smoothed with an isotropic Gaussian kernel (standard
    deviation ``correlation_length`` pixels, wrap-around boundaries) and the
    lowest ``target_porosity`` fraction of values becomes pore.  The result is
    deterministic in ``seed``.  Isolated pores are *not* removed here; see
    :func:`fill_isolated_pores`.
    """
    if size < 16:
        raise ValueError("size must be at least 16")
    if not 0.05 < target_porosity < 0.95:
        raise ValueError("target_porosity must lie in (0.05, 0.95)")
    if correlation_length <= 0:
        raise ValueError("correlation_length must be positive")
    rng = np.random.default_rng(seed)
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)),
                                    correlation_length, mode="wrap")
    n_pore = int(round(target_porosity * size * size))
    order = np.argsort(field, axis=None, kind="stable")
    img = np.ones(size * size, dtype=np.uint8)
    img[order[:n_pore]] = 0
    img = img.reshape(size, size)
    if abs(porosity(img) - target_porosity) > 0.01:
        raise ValueError(f"porosity {target_porosity} unreachable at size {size}")
    return img


def _periodic_pore_labels(img: np.ndarray) -> np.ndarray:
    """Label 4-connected pore clusters with wrap-around merging.

    Labels are renumbered so that label ``j`` (1-based) is the cluster whose
    smallest flat pixel index is the j-th smallest.
    """
    labels, n = ndimage.label(img == 0)
    if n == 0:
        return labels
    parent = np.arange(n + 1)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a_edge, b_edge in ((labels[0, :], labels[-1, :]), (labels[:, 0], labels[:, -1])):
        for a, b in zip(a_edge, b_edge):
            if a and b:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(a) for a in range(n + 1)])
    merged = roots[labels]
    # ndimage numbers clusters in raster order, so root order = first-pixel order
    _, dense = np.unique(merged, return_inverse=True)
    return dense.reshape(img.shape)


def fill_isolated_pores(img) -> np.ndarray:
    """Keep only the largest periodic 4-connected pore cluster.

    Ties are broken in favour of the cluster containing the smallest
    row-major pixel index.  Images without pore pixels come back unchanged.
    """
    img = check_binary(img)
    labels = _periodic_pore_labels(img)
    if labels.max() == 0:
        return img.copy()
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    keep = int(np.argmax(sizes))  # argmax returns the first (lowest-label) maximum
    out = np.ones_like(img)
    out[labels == keep] = 0
    return out


def percolates(img) -> tuple[bool, bool]:
    """Whether some pore cluster wraps around the periodic cell along x / y.

    A cluster that winds around the cell along an axis lifts to a single
    cluster in the doubled periodic cover along that axis, so a pixel and
    its copy one period away share a label.
    """
    img = check_binary(img)
    h, w = img.shape
    pore = img == 0
    lab_x = _periodic_pore_labels(np.tile(img, (1, 2)))
    lab_y = _periodic_pore_labels(np.tile(img, (2, 1)))
    along_x = bool(np.any(pore & (lab_x[:, :w] == lab_x[:, w:])))
    along_y = bool(np.any(pore & (lab_y[:h, :] == lab_y[h:, :])))
    return along_x, along_y


def _runs(line_mask: np.ndarray) -> list[int]:
    runs = []
    for row in line_mask:
        padded = np.concatenate(([0], row.astype(np.int8), [0]))
        d = np.diff(padded)
        starts = np.flatnonzero(d == 1)
        ends = np.flatnonzero(d == -1)
        runs.extend((ends - starts).tolist())
    return runs


def chord_statistics(img) -> dict:
    """Mean horizontal / vertical pore run lengths (non-periodic) and their asymmetry."""
    img = check_binary(img)
    pore = img == 0
    if not pore.any():
        raise ValueError("chord statistics need at least one pore pixel")
    l_h = float(np.mean(_runs(pore)))
    l_v = float(np.mean(_runs(pore.T)))
    return {"l_h": l_h, "l_v": l_v, "eta": abs(l_h - l_v) / (l_h + l_v)}


def gradient_anisotropy(img) -> float:
    """Ratio of mean |forward difference| along x to that along y.

    A constant image is treated as isotropic and returns 1.0.
    """
    img = np.asarray(img, dtype=np.float64)
    if min(img.shape) < 2:
        raise ValueError("gradient anisotropy needs at least 2x2 pixels")
    gx = np.abs(np.diff(img, axis=1)).mean()
    gy = np.abs(np.diff(img, axis=0)).mean()
    if gx == 0.0 and gy == 0.0:
        return 1.0
    return float(gx / (gy + GRADIENT_GUARD))
