"""Joint image/tensor augmentation.

Order per sample: D4 element -> elastic warp -> erosion -> dilation -> cutout.
Only D4 and the elastic warp touch the tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import d4
from .tensor import PermTensor

CUTOUT_VALUE = 0.5


@dataclass(frozen=True)
class AugConfig:
    p_d4: float = 1.0
    p_erosion: float = 0.08
    p_dilation: float = 0.08
    p_elastic: float = 0.08
    elastic_alpha: float = 3.0
    elastic_sigma: float = 2.0
    p_cutout: float = 0.10
    cutout_size: int = 8

    def __post_init__(self):
        for name in ("p_d4", "p_erosion", "p_dilation", "p_elastic", "p_cutout"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.elastic_alpha < 0:
            raise ValueError("elastic_alpha must be non-negative")
        if self.elastic_sigma <= 0:
            raise ValueError("elastic_sigma must be positive")
        if self.cutout_size < 0:
            raise ValueError("cutout_size must be non-negative")

    @classmethod
    def d4_only(cls) -> "AugConfig":
        return cls(p_erosion=0.0, p_dilation=0.0, p_elastic=0.0, p_cutout=0.0)

    @classmethod
    def none(cls) -> "AugConfig":
        return replace(cls.d4_only(), p_d4=0.0)


def erode(img) -> np.ndarray:
    """3x3 minimum filter; borders replicate the edge pixel."""
    return ndimage.minimum_filter(np.asarray(img), size=3, mode="nearest")


def dilate(img) -> np.ndarray:
    """3x3 maximum filter; borders replicate the edge pixel."""
    return ndimage.maximum_filter(np.asarray(img), size=3, mode="nearest")


@dataclass
class ElasticResult:
    image: np.ndarray
    jacobian: np.ndarray
    k: PermTensor


def displacement_fields(shape, alpha: float, sigma: float, seed: int):
    """``alpha * G_sigma(U(-1, 1))`` for x (rightward) and y (upward) displacement."""
    rng = np.random.default_rng(seed)
    dx = alpha * ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, shape), sigma)
    dy = alpha * ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, shape), sigma)
    return dx, dy


def center_jacobian(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """J = I + grad(delta) at the centre pixel by central differences.

    x derivatives step along columns, y derivatives step upward (row - 1).
    """
    r, c = dx.shape[0] // 2, dx.shape[1] // 2
    ddx_dx = 0.5 * (dx[r, c + 1] - dx[r, c - 1])
    ddx_dy = 0.5 * (dx[r - 1, c] - dx[r + 1, c])
    ddy_dx = 0.5 * (dy[r, c + 1] - dy[r, c - 1])
    ddy_dy = 0.5 * (dy[r - 1, c] - dy[r + 1, c])
    return np.array([[1.0 + ddx_dx, ddx_dy], [ddy_dx, 1.0 + ddy_dy]])


def elastic_deform(img, k: PermTensor, alpha: float, sigma: float, seed: int) -> ElasticResult:
    img = np.asarray(img, dtype=np.float64)
    if alpha < 0 or sigma <= 0:
        raise ValueError("elastic deformation needs alpha >= 0 and sigma > 0")
    dx, dy = displacement_fields(img.shape, alpha, sigma, seed)
    rows, cols = np.meshgrid(np.arange(img.shape[0]), np.arange(img.shape[1]), indexing="ij")
    # sample at (x + dx, y + dy); y is up, so the row coordinate moves by -dy
    warped = ndimage.map_coordinates(img, [rows - dy, cols + dx], order=1, mode="nearest")
    J = center_jacobian(dx, dy)
    Kp = J @ k.as_matrix() @ J.T
    Kp = 0.5 * (Kp + Kp.T)
    return ElasticResult(np.clip(warped, 0.0, 1.0), J, PermTensor.from_matrix(Kp))


def cutout(img, size: int, seed: int, placement: tuple[int, int] | None = None) -> np.ndarray:
    """Set one ``size`` x ``size`` square (fully inside the image) to 0.5."""
    out = np.array(img, dtype=np.float64)
    h, w = out.shape
    if size > w or size > h:
        raise ValueError(f"cutout size {size} exceeds image size {out.shape}")
    if size == 0:
        return out
    if placement is None:
        rng = np.random.default_rng(seed)
        placement = (int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1)))
    r0, c0 = placement
    out[r0:r0 + size, c0:c0 + size] = CUTOUT_VALUE
    return out


@dataclass
class AugmentRecord:
    image: np.ndarray
    k: PermTensor
    g: d4.D4Element
    fired: dict = field(default_factory=dict)
    jacobian: np.ndarray | None = None


def augment(image, k: PermTensor, cfg: AugConfig, rng_seed: int,
            force_g: d4.D4Element | None = None) -> AugmentRecord:
    """Run the pipeline and keep provenance (element, branches fired, Jacobian).

    Every random variate is drawn up front in a fixed order so the same seed
    gives the same draws whichever branches fire.
    """
    rng = np.random.default_rng(rng_seed)
    g_index = int(rng.integers(len(d4.ELEMENTS)))
    u_d4, u_el, u_er, u_di, u_cut = rng.random(5)
    elastic_seed, cutout_seed = (int(s) for s in rng.integers(0, 2**62, size=2))

    img = np.asarray(image, dtype=np.float64)
    fired = {"d4": False, "elastic": False, "erosion": False, "dilation": False, "cutout": False}
    g = d4.IDENTITY
    if force_g is not None:
        g = force_g
        fired["d4"] = True
    elif u_d4 < cfg.p_d4:
        g = d4.ELEMENTS[g_index]
        fired["d4"] = True
    img = d4.transform_image(img, g)
    k = d4.transform_tensor(k, g)
    J = None
    if u_el < cfg.p_elastic:
        res = elastic_deform(img, k, cfg.elastic_alpha, cfg.elastic_sigma, elastic_seed)
        img, k, J = res.image, res.k, res.jacobian
        fired["elastic"] = True
    if u_er < cfg.p_erosion:
        img = erode(img)
        fired["erosion"] = True
    if u_di < cfg.p_dilation:
        img = dilate(img)
        fired["dilation"] = True
    if u_cut < cfg.p_cutout:
        img = cutout(img, cfg.cutout_size, cutout_seed)
        fired["cutout"] = True
    return AugmentRecord(img, k, g, fired, J)


def apply_pipeline(sample, cfg: AugConfig, rng_seed: int,
                   force_g: d4.D4Element | None = None) -> tuple[np.ndarray, PermTensor]:
    rec = augment(sample.image, sample.k, cfg, rng_seed, force_g=force_g)
    return rec.image, rec.k
