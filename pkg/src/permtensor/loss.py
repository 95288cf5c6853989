"""Four-term physics-aware regression loss on raw ``[kxx, kxy, kyx, kyy]`` outputs.

::

    total = mse + lambda_sym * sym + lambda_pos * pos + lambda_offdiag * offdiag

The mse and offdiag terms both penalise squared errors; they are kept
separate (and reported separately) rather than merged.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda_sym: float = 0.20
    lambda_pos: float = 0.05
    lambda_offdiag: float = 1.0
    w_d: float = 1.0
    w_o: float = 1.5
    margin: float = 1e-3

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative, got {v}")
        if self.margin <= 0:
            raise ValueError("margin must be positive")

    @classmethod
    def for_phase(cls, phase: int) -> "LossWeights":
        if phase == 2:
            return cls(lambda_sym=0.10, lambda_pos=0.05, lambda_offdiag=0.0, w_d=1.0, w_o=1.0)
        if phase in (3, 4):
            return cls()
        raise ValueError(f"unknown phase {phase}")


def _hinge_sq(x: Tensor, margin: float) -> Tensor:
    # relu has zero gradient at the kink, so the hinge does too
    return ad.square(ad.relu(ad.sub(margin, x)))


def physics_loss(pred, truth, w: LossWeights) -> dict:
    """Scalar Tensors ``total``, ``mse``, ``sym``, ``pos``, ``offdiag``.

    ``sym``, ``pos`` and ``offdiag`` are unweighted batch means; the
    ``weighted_*`` entries carry their lambda factors and sum with ``mse``
    to ``total``.
    """
    pred = ad.as_tensor(pred)
    truth = np.asarray(truth.data if isinstance(truth, Tensor) else truth, dtype=np.float64)
    if pred.ndim != 2 or pred.shape[1] != 4:
        raise ad.ShapeError(f"pred must be (B, 4), got {pred.shape}")
    if truth.shape != pred.shape:
        raise ad.ShapeError(f"pred {pred.shape} and truth {truth.shape} differ")
    if pred.shape[0] == 0:
        raise ValueError("empty batch")

    err = pred - truth
    sq = ad.square(err)
    mse = ad.mean(ad.sum_(sq, axis=1))
    sym = ad.mean(ad.square(pred[:, 1] - pred[:, 2]))
    pos = ad.mean(_hinge_sq(pred[:, 0], w.margin) + _hinge_sq(pred[:, 3], w.margin))
    cw = np.array([w.w_d, w.w_o, w.w_o, w.w_d])
    offdiag = ad.mean(ad.sum_(sq * cw, axis=1))
    total = mse + w.lambda_sym * sym + w.lambda_pos * pos + w.lambda_offdiag * offdiag
    return {"total": total, "mse": mse, "sym": sym, "pos": pos, "offdiag": offdiag,
            "weighted_sym": w.lambda_sym * sym, "weighted_pos": w.lambda_pos * pos,
            "weighted_offdiag": w.lambda_offdiag * offdiag}


def loss_values(terms: dict) -> dict:
    return {k: float(v.data) for k, v in terms.items()}
