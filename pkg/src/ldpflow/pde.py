"""
Finite-volume reference solvers for the limit equations.

* `heat_solve`:              d_t rho = sigma2 * d_xx rho
* `drift_interaction_solve`: d_t rho = sigma2 d_xx rho + A d_x(rho d_x[Psi + rho*Phi])
* `decay_solve`:             d_t rho = d_xx rho + d_x(rho d_x Psi) - lambda rho

Diffusion is implicit (Crank-Nicolson or implicit Euler), the drift flux is
explicit with a central face average of the density.  Torus grids are
periodic, interval grids have no-flux walls.  Negative densities are reported
as errors, never clipped.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .measures import (
    Grid,
    GridMeasure,
    MeasurePath,
    OccupationProfile,
    convolution_matrix,
)
from .transport import face_divergence, face_gradient

POSITIVITY_TOL = 1e-12


class SchemeInstability(RuntimeError):
    pass


@dataclass(frozen=True)
class PdeConfig:
    grid: Grid
    dt: float
    t_end: float
    scheme: str = "crank_nicolson"
    A: float = 1.0
    sigma2: float = 1.0
    lam: float = 0.0

    def __post_init__(self):
        if not (self.dt > 0 and self.t_end > 0):
            raise ValueError("dt and t_end must be positive")
        if self.dt > self.t_end * (1 + 1e-12):
            raise ValueError("dt must not exceed t_end")
        if self.scheme not in ("crank_nicolson", "implicit_euler"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not (self.A > 0 and self.sigma2 > 0):
            raise ValueError("A and sigma2 must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")

    @property
    def n_steps(self) -> int:
        k = round(self.t_end / self.dt)
        if abs(k * self.dt - self.t_end) > 1e-9 * self.t_end:
            raise ValueError("t_end must be an integer multiple of dt")
        return int(k)

    @property
    def theta(self) -> float:
        return 0.5 if self.scheme == "crank_nicolson" else 1.0


def laplacian_matrix(grid: Grid) -> sp.csc_matrix:
    """Sparse second-difference operator (periodic or no-flux)."""
    n = grid.n_cells
    main = -2.0 * np.ones(n)
    off = np.ones(n - 1)
    if not grid.periodic:
        main[0] = main[-1] = -1.0
    L = sp.diags([off, main, off], [-1, 0, 1], shape=(n, n), format="lil")
    if grid.periodic and n > 2:
        L[0, n - 1] = 1.0
        L[n - 1, 0] = 1.0
    elif grid.periodic:
        L = sp.lil_matrix(np.zeros((n, n)))
    return (L / grid.dx**2).tocsc()


class _ImplicitDiffusion:
    """Factorized theta-scheme for ``f' = kappa * Lap f + source``."""

    def __init__(self, grid: Grid, kappa: float, dt: float, theta: float):
        L = laplacian_matrix(grid)
        I = sp.identity(grid.n_cells, format="csc")
        self.lhs = splu((I - theta * dt * kappa * L).tocsc())
        self.rhs = (I + (1 - theta) * dt * kappa * L).tocsr()

    def step(self, f: np.ndarray, explicit: np.ndarray | None = None) -> np.ndarray:
        b = self.rhs @ f
        if explicit is not None:
            b = b + explicit
        return self.lhs.solve(b)


def _check_positive(f: np.ndarray, t: float):
    if f.min() < -POSITIVITY_TOL:
        raise SchemeInstability(f"scheme instability at t={t:.4g}: min density {f.min():.3e}; reduce dt")


def _as_density(rho0):
    if isinstance(rho0, OccupationProfile):
        return rho0.values.copy(), True
    return rho0.density.copy(), False


def _path(grid, times, dens, occupation):
    return MeasurePath.from_densities(grid, times, dens, occupation=occupation)


def heat_solve(rho0, cfg: PdeConfig, record_every: int = 1) -> MeasurePath:
    """Solve ``d_t rho = sigma2 d_xx rho`` (``sigma2 = 1`` gives the heat equation).

    Also accepts an `OccupationProfile`, for the lattice-gas limit equation.
    """
    if cfg.lam != 0:
        raise ValueError("heat_solve needs lam = 0")
    grid = cfg.grid
    rho0.grid.check_same(grid)
    f, occ = _as_density(rho0)
    solver = _ImplicitDiffusion(grid, cfg.sigma2, cfg.dt, cfg.theta)
    mass0 = math.fsum(f) * grid.dx
    out, times = [f.copy()], [0.0]
    for k in range(1, cfg.n_steps + 1):
        f = solver.step(f)
        _check_positive(f, k * cfg.dt)
        if k % record_every == 0:
            out.append(f.copy())
            times.append(k * cfg.dt)
    mass = math.fsum(out[-1]) * grid.dx
    if abs(mass - mass0) > 1e-12 * max(1.0, mass0) * max(1, cfg.n_steps):
        raise SchemeInstability("mass not conserved")
    return _path(grid, times, out, occ)


def _drift_flux_divergence(f, xi, grid, A):
    """``A d_x(f d_x xi)`` with central face densities."""
    if grid.periodic:
        f_face = 0.5 * (f + np.roll(f, -1))
    else:
        f_face = 0.5 * (f[:-1] + f[1:])
    return face_divergence(A * f_face * face_gradient(xi, grid), grid)


def _drift_velocity_check(xi, grid, A, dt):
    vmax = A * np.abs(face_gradient(xi, grid)).max(initial=0.0)
    if vmax * dt > grid.dx:
        raise SchemeInstability(f"CFL violated (|v| dt / dx = {vmax * dt / grid.dx:.3g}); reduce dt")


def drift_interaction_solve(rho0: GridMeasure, psi, phi, cfg: PdeConfig, record_every: int = 1) -> MeasurePath:
    """Drift-diffusion with background potential ``psi`` and kernel ``phi``.

    ``phi`` uses the offset layout of `EnergySpec.interaction`; pass ``None``
    (or zeros) for no interaction.
    """
    grid = cfg.grid
    rho0.grid.check_same(grid)
    n = grid.n_cells
    psi = np.zeros(n) if psi is None else np.asarray(psi, dtype=float)
    C = None
    if phi is not None and np.any(np.asarray(phi) != 0):
        C = convolution_matrix(phi, grid)
    f = rho0.density.copy()
    solver = _ImplicitDiffusion(grid, cfg.sigma2, cfg.dt, cfg.theta)
    out, times = [f.copy()], [0.0]
    for k in range(1, cfg.n_steps + 1):
        xi = psi if C is None else psi + C @ (f * grid.dx)
        explicit = None
        if np.any(xi != 0):
            _drift_velocity_check(xi, grid, cfg.A, cfg.dt)
            explicit = cfg.dt * _drift_flux_divergence(f, xi, grid, cfg.A)
        f = solver.step(f, explicit)
        _check_positive(f, k * cfg.dt)
        if k % record_every == 0:
            out.append(f.copy())
            times.append(k * cfg.dt)
    return _path(grid, times, out, False)


def decay_solve(rho0: GridMeasure, psi, lam: float, cfg: PdeConfig, record_every: int = 1) -> MeasurePath:
    """Drift-diffusion followed each step by the exact decay factor ``exp(-lam dt)``."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if rho0.mass > 1 + 1e-12:
        raise ValueError("initial mass must not exceed one")
    grid = cfg.grid
    rho0.grid.check_same(grid)
    psi = np.zeros(grid.n_cells) if psi is None else np.asarray(psi, dtype=float)
    solver = _ImplicitDiffusion(grid, cfg.sigma2, cfg.dt, cfg.theta)
    survive = math.exp(-lam * cfg.dt)
    drift = np.any(psi != 0)
    if drift:
        _drift_velocity_check(psi, grid, cfg.A, cfg.dt)
    f = rho0.density.copy()
    out, times = [f.copy()], [0.0]
    for k in range(1, cfg.n_steps + 1):
        explicit = cfg.dt * _drift_flux_divergence(f, psi, grid, cfg.A) if drift else None
        f = solver.step(f, explicit) * survive
        _check_positive(f, k * cfg.dt)
        if k % record_every == 0:
            out.append(f.copy())
            times.append(k * cfg.dt)
    return _path(grid, times, out, False)
