"""2x2 permeability tensor value type and scalar functionals.

Components are stored in the network output order ``[kxx, kxy, kyx, kyy]``.
No symmetry is imposed by the type: predictions may be asymmetric, and
oracle labels are checked for symmetry at ingestion time instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DELTA_GUARD = 1e-12


@dataclass(frozen=True)
class PermTensor:
    kxx: float
    kxy: float
    kyx: float
    kyy: float

    def __post_init__(self):
        for name in ("kxx", "kxy", "kyx", "kyy"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v!r}")
            object.__setattr__(self, name, v)

    @classmethod
    def from_matrix(cls, m) -> "PermTensor":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (2, 2):
            raise ValueError(f"expected a 2x2 matrix, got shape {m.shape}")
        return cls(m[0, 0], m[0, 1], m[1, 0], m[1, 1])

    @classmethod
    def from_vector(cls, v) -> "PermTensor":
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.shape != (4,):
            raise ValueError(f"expected 4 components, got {v.shape}")
        return cls(*v)

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.kxx, self.kxy], [self.kyx, self.kyy]])

    def as_vector(self) -> np.ndarray:
        return np.array([self.kxx, self.kxy, self.kyx, self.kyy])

    def symmetrized(self) -> "PermTensor":
        b = 0.5 * (self.kxy + self.kyx)
        return PermTensor(self.kxx, b, b, self.kyy)

    def to_dict(self) -> dict:
        return {"kxx": self.kxx, "kxy": self.kxy, "kyx": self.kyx, "kyy": self.kyy}


@dataclass(frozen=True)
class TensorSpectrum:
    lambda_min: float
    lambda_max: float
    anisotropy_ratio: float
    condition_number: float
    degenerate: bool = False


def symmetry_error(k: PermTensor) -> float:
    return abs(k.kxy - k.kyx)


def _sym_eigs(a: float, b: float, c: float) -> tuple[float, float]:
    # closed form for [[a, b], [b, c]]; hypot keeps the discriminant non-negative
    mid = 0.5 * (a + c)
    rad = math.hypot(0.5 * (a - c), b)
    return mid - rad, mid + rad


def spectrum(k: PermTensor) -> TensorSpectrum:
    """Eigenvalues of the symmetric part ``(K + K^T)/2`` and derived ratios.

    A zero smallest eigenvalue gives an infinite anisotropy ratio and sets
    ``degenerate`` instead of raising.
    """
    b = 0.5 * (k.kxy + k.kyx)
    lo, hi = _sym_eigs(k.kxx, b, k.kyy)
    if lo == 0.0:
        return TensorSpectrum(lo, hi, math.inf, math.inf, degenerate=True)
    ratio = abs(hi) / abs(lo)
    return TensorSpectrum(lo, hi, ratio, ratio)


def is_positive_definite(k: PermTensor) -> bool:
    return spectrum(k).lambda_min > 0.0


def tensor_functionals(k: PermTensor) -> dict:
    diag = 0.5 * (abs(k.kxx) + abs(k.kyy))
    off = 0.5 * (abs(k.kxy) + abs(k.kyx))
    return {
        "frobenius": math.sqrt(k.kxx**2 + k.kxy**2 + k.kyx**2 + k.kyy**2),
        "trace": k.kxx + k.kyy,
        "determinant": k.kxx * k.kyy - k.kxy * k.kyx,
        "offdiag_dominance": off / (diag + off + DELTA_GUARD),
    }


# Vectorised helpers over (N, 4) arrays in [kxx, kxy, kyx, kyy] order.

def batch_symmetry_error(k: np.ndarray) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    return np.abs(k[:, 1] - k[:, 2])


def batch_eigenvalues(k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k = np.asarray(k, dtype=np.float64)
    b = 0.5 * (k[:, 1] + k[:, 2])
    mid = 0.5 * (k[:, 0] + k[:, 3])
    rad = np.hypot(0.5 * (k[:, 0] - k[:, 3]), b)
    return mid - rad, mid + rad


def batch_anisotropy_ratio(k: np.ndarray) -> np.ndarray:
    lo, hi = batch_eigenvalues(k)
    with np.errstate(divide="ignore", invalid="ignore"):
        ar = np.abs(hi) / np.abs(lo)
    return np.where(lo == 0.0, np.inf, ar)


def batch_offdiag_dominance(k: np.ndarray) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    diag = 0.5 * (np.abs(k[:, 0]) + np.abs(k[:, 3]))
    off = 0.5 * (np.abs(k[:, 1]) + np.abs(k[:, 2]))
    return off / (diag + off + DELTA_GUARD)


def batch_component_anisotropy(k: np.ndarray, eps: float = DELTA_GUARD) -> np.ndarray:
    """max(|kxx|,|kyy|) / (max(|kxy|,|kyx|) + eps)."""
    k = np.abs(np.asarray(k, dtype=np.float64))
    return np.maximum(k[:, 0], k[:, 3]) / (np.maximum(k[:, 1], k[:, 2]) + eps)
