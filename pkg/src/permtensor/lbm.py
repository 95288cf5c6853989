"""D2Q9 BGK lattice-Boltzmann permeability solver.

Periodic boundaries on all sides, half-way bounce-back at solid nodes, and a
uniform body force added through the equilibrium velocity shift
``u_eq = u + tau * F / rho``.  The fluid velocity reported to Darcy's law is
the half-step average ``u + F / (2 rho)``.

Lattice axes follow :mod:`permtensor.d4`: x along increasing column, y along
decreasing row.  Column ``j`` of the returned tensor is the volume-averaged
(superficial) velocity produced by a unit force along axis ``j``, scaled by
the lattice dynamic viscosity ``(tau - 0.5) / 3``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

from .microstructure import check_binary, percolates
from .tensor import PermTensor

log = logging.getLogger(__name__)

# direction i: (cx, cy) with y pointing up
CX = np.array([0, 1, 0, -1, 0, 1, -1, -1, 1], dtype=np.int64)
CY = np.array([0, 0, 1, 0, -1, 1, 1, -1, -1], dtype=np.int64)
W = np.array([4 / 9] + [1 / 9] * 4 + [1 / 36] * 4)
OPP = np.array([0, 3, 4, 1, 2, 7, 8, 5, 6], dtype=np.int64)


class LbmError(RuntimeError):
    pass


class LbmNotConverged(LbmError):
    def __init__(self, iterations: int, residual: float):
        super().__init__(f"LBM did not converge in {iterations} iterations "
                         f"(final relative change {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class LbmConfig:
    tau: float = 1.0
    body_force: float = 1e-6
    max_iterations: int = 50_000
    convergence_tol: float = 1e-8
    check_every: int = 100

    def __post_init__(self):
        if not self.tau > 0.5:
            raise ValueError("BGK stability requires tau > 0.5")
        if not 0 < self.body_force < 1e-2:
            raise ValueError("body_force must be small and positive (Stokes regime)")
        if self.max_iterations < self.check_every:
            raise ValueError("max_iterations must cover at least one convergence check")

    @property
    def viscosity(self) -> float:
        return (self.tau - 0.5) / 3.0


def _neighbour_table(solid: np.ndarray):
    """Compact fluid-node indexing plus streaming destinations (-1 = wall)."""
    h, w = solid.shape
    fluid = ~solid
    node_id = -np.ones((h, w), dtype=np.int64)
    rr, cc = np.nonzero(fluid)
    node_id[rr, cc] = np.arange(rr.size)
    dest = np.empty((rr.size, 9), dtype=np.int64)
    for i in range(9):
        dest[:, i] = node_id[(rr - CY[i]) % h, (cc + CX[i]) % w]
    return rr, cc, dest


@njit(cache=True)
def _run(f, dest, fx, fy, tau, nsteps):
    n = f.shape[0]
    g = np.empty_like(f)
    feq = np.empty(9)
    for _ in range(nsteps):
        for k in range(n):
            rho = 0.0
            mx = 0.0
            my = 0.0
            for i in range(9):
                v = f[k, i]
                rho += v
                mx += v * CX[i]
                my += v * CY[i]
            ux = (mx + tau * fx) / rho
            uy = (my + tau * fy) / rho
            usq = 1.5 * (ux * ux + uy * uy)
            for i in range(9):
                cu = 3.0 * (CX[i] * ux + CY[i] * uy)
                feq[i] = W[i] * rho * (1.0 + cu + 0.5 * cu * cu - usq)
            for i in range(9):
                post = f[k, i] - (f[k, i] - feq[i]) / tau
                d = dest[k, i]
                if d >= 0:
                    g[d, i] = post
                else:
                    g[k, OPP[i]] = post
        f, g = g, f
    return f


def _velocity(f: np.ndarray, fx: float, fy: float):
    rho = f.sum(axis=1)
    ux = (f @ CX + 0.5 * fx) / rho
    uy = (f @ CY + 0.5 * fy) / rho
    return ux, uy


def solve_flow(solid: np.ndarray, force: tuple[float, float], cfg: LbmConfig):
    """Run to steady state under a uniform body force.

    Returns ``(ux, uy, iterations)`` on the fluid nodes (in the order of
    ``np.nonzero(~solid)``).
    """
    solid = np.asarray(solid, dtype=bool)
    if solid.all():
        raise LbmError("image has no pore nodes")
    _, _, dest = _neighbour_table(solid)
    fx, fy = float(force[0]), float(force[1])
    f = np.tile(W, (dest.shape[0], 1))
    ux_old, uy_old = _velocity(f, fx, fy)
    floor = max(abs(fx), abs(fy)) * np.sqrt(dest.shape[0])
    it = 0
    residual = np.inf
    while it < cfg.max_iterations:
        f = _run(f, dest, fx, fy, cfg.tau, cfg.check_every)
        it += cfg.check_every
        ux, uy = _velocity(f, fx, fy)
        if not (np.all(np.isfinite(ux)) and np.all(np.isfinite(uy))):
            raise LbmError(f"LBM diverged after {it} iterations")
        norm = np.sqrt(np.sum(ux * ux + uy * uy))
        diff = np.sqrt(np.sum((ux - ux_old) ** 2 + (uy - uy_old) ** 2))
        # floor keeps blocked directions (velocity ~ 0) from stalling the test
        residual = diff / max(norm, floor)
        if residual < cfg.convergence_tol:
            return ux, uy, it
        ux_old, uy_old = ux, uy
    raise LbmNotConverged(it, residual)


def lbm_permeability(img, cfg: LbmConfig | None = None) -> PermTensor:
    """Permeability tensor of a binary image (1 = solid) in lattice units.

    Two solves are run, with the body force along +x and then +y.  Raises
    :class:`LbmNotConverged` carrying the last residual if either solve
    fails to settle within ``cfg.max_iterations``, and :class:`LbmError` if
    the pore phase does not percolate.
    """
    cfg = cfg or LbmConfig()
    img = check_binary(img)
    if not any(percolates(img)):
        raise LbmError("pore phase does not percolate in any direction")
    solid = img.astype(bool)
    n_total = solid.size
    mu = cfg.viscosity
    F = cfg.body_force
    cols = []
    for force in ((F, 0.0), (0.0, F)):
        ux, uy, it = solve_flow(solid, force, cfg)
        log.debug("LBM force=%s converged after %d iterations", force, it)
        # superficial velocity: solid nodes contribute zero to the volume average
        cols.append((mu * ux.sum() / n_total / F, mu * uy.sum() / n_total / F))
    (kxx, kyx), (kxy, kyy) = cols
    return PermTensor(kxx, kxy, kyx, kyy)
