"""
Pathwise rate functionals and the gradient-flow defect.

For a discrete path ``rho_0, ..., rho_K`` on a uniform time grid every
interval contributes with the midpoint state ``rho_{k+1/2}``:

    defect_k = 1/2 || (rho_{k+1} - rho_k)/dt + M xi ||^2_{D,*} dt,
    xi = dE/drho(rho_{k+1/2}),  M xi = -div(D(rho_{k+1/2}) grad xi).

The three-term form ``E(T) - E(0) + 1/2 sum (||v||^2_{D,*} + ||xi||^2_D) dt``
differs from the summed defect only by the midpoint chain-rule residual.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .measures import EnergySpec, GridMeasure, MeasurePath, OccupationProfile, convolution_matrix
from .scalar import DissipationPair, conjugate
from .transport import (
    MobilityField,
    dual_inner,
    dual_norm_sq,
    face_divergence,
    face_gradient,
    primal_norm_sq,
    weighted_laplacian,
)

MOBILITY_KINDS = ("wasserstein", "ssep", "scaled")


@dataclass(frozen=True)
class MobilityKind:
    """``D(rho) = rho`` (wasserstein), ``rho(1-rho)`` (ssep) or ``rho sigma2`` (scaled)."""

    kind: str = "wasserstein"
    sigma2: float = 1.0

    def __post_init__(self):
        if self.kind not in MOBILITY_KINDS:
            raise ValueError(f"unknown mobility {self.kind!r}")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")

    def cell_values(self, rho) -> np.ndarray:
        f = rho.density
        if self.kind == "ssep":
            if np.any(f <= 0) or np.any(f >= 1):
                raise ValueError("mobility vanishes: ssep states must lie strictly inside (0, 1)")
            return f * (1.0 - f)
        if np.any(f <= 0):
            raise ValueError("mobility vanishes: densities must be strictly positive")
        return f * self.sigma2 if self.kind == "scaled" else f.copy()

    def field(self, rho) -> MobilityField:
        return MobilityField.from_cells(rho.grid, self.cell_values(rho))


@dataclass
class RateReport:
    value: float
    per_interval: list
    refinement_metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"value": self.value, "per_interval": list(map(float, self.per_interval)),
                           "refinement_metadata": self.refinement_metadata}, indent=2, sort_keys=True)


def onsager_apply(xi, rho, kind: MobilityKind | str = "wasserstein") -> np.ndarray:
    """``M_rho xi = -div(D(rho) grad xi)`` with the face stencil of `transport`."""
    kind = _kind(kind)
    return -weighted_laplacian(np.asarray(xi, dtype=float), kind.field(rho))


def _kind(kind) -> MobilityKind:
    return MobilityKind(kind) if isinstance(kind, str) else kind


def _midpoint(a, b):
    if isinstance(a, OccupationProfile):
        return OccupationProfile(a.grid, 0.5 * (a.values + b.values))
    return GridMeasure(a.grid, 0.5 * (a.weights + b.weights))


def _intervals(path: MeasurePath):
    if len(path) < 2:
        raise ValueError("path needs at least two slices")
    dt = path.dt
    f = path.densities()
    for k in range(len(path) - 1):
        yield k, dt, _midpoint(path.slices[k], path.slices[k + 1]), (f[k + 1] - f[k]) / dt


def defect_terms(path: MeasurePath, spec: EnergySpec, kind: MobilityKind | str = "wasserstein") -> np.ndarray:
    kind = _kind(kind)
    out = []
    for _, dt, mid, v in _intervals(path):
        D = kind.field(mid)
        xi = spec.derivative(mid)
        s = v - weighted_laplacian(xi, D)
        out.append(0.5 * dual_norm_sq(s, D) * dt)
    return np.array(out)


def gradflow_defect(path: MeasurePath, spec: EnergySpec, kind: MobilityKind | str = "wasserstein",
                    report: bool = False):
    """``1/2 int ||d_t rho + M dE/drho||^2_{D,*} dt`` (nonnegative; zero on gradient flows)."""
    terms = defect_terms(path, spec, kind)
    value = math.fsum(terms)
    if report:
        return RateReport(value, terms.tolist(), _metadata(path))
    return value


def rate_quadratic(path: MeasurePath, spec: EnergySpec, kind: MobilityKind | str = "wasserstein",
                   report: bool = False):
    """``E(T) - E(0) + 1/2 int [||d_t rho||^2_{D,*} + ||dE/drho||^2_D] dt``."""
    kind = _kind(kind)
    terms = []
    for _, dt, mid, v in _intervals(path):
        D = kind.field(mid)
        xi = spec.derivative(mid)
        terms.append(0.5 * (dual_norm_sq(v, D) + primal_norm_sq(xi, D)) * dt)
    dE = spec.value(path.slices[-1]) - spec.value(path.slices[0])
    value = dE + math.fsum(terms)
    if report:
        meta = _metadata(path)
        meta["energy_difference"] = dE
        return RateReport(value, terms, meta)
    return value


def _metadata(path: MeasurePath) -> dict:
    g = path.grid
    return {"n_cells": g.n_cells, "dx": g.dx, "K": len(path) - 1, "dt": path.dt, "topology": g.topology}


# ---------------------------------------------------------------------------
# scalar paths with a dissipation pair


def check_legendre_pair(pair: DissipationPair, u: float, v_samples=None, tol: float = 1e-8) -> float:
    """Largest gap between ``psi*`` and the numeric conjugate of ``psi`` at state ``u``."""
    v_samples = np.linspace(-3.0, 3.0, 7) if v_samples is None else v_samples
    worst = 0.0
    for v in np.atleast_1d(v_samples):
        num = conjugate(lambda x: float(pair.psi(x, u)), float(v))
        worst = max(worst, abs(num - float(pair.psi_star(v, u))))
    if worst > tol:
        raise ValueError(f"not a Legendre pair (gap {worst:.3e})")
    return worst


def rate_psi(times, values, energy, pair: DissipationPair, check_pair: bool = True) -> float:
    """``E(T) - E(0) + int [psi*(u') + psi(-E'(u))] dt`` with midpoint states."""
    t = np.asarray(times, dtype=float)
    u = np.asarray(values, dtype=float)
    if t.size != u.size or t.size < 2:
        raise ValueError("need at least two time points")
    dt = np.diff(t)
    if dt.min() <= 0 or dt.max() - dt.min() > 1e-9 * max(1.0, abs(t[-1])):
        raise ValueError("time grid must be uniform")
    mid = 0.5 * (u[1:] + u[:-1])
    vel = np.diff(u) / dt
    if check_pair:
        for s in np.unique(mid[[0, mid.size // 2, -1]]):
            check_legendre_pair(pair, float(s))
    dens = pair.psi_star(vel, mid) + pair.psi(-np.asarray(energy.dE(mid)), mid)
    return float(energy.E(u[-1]) - energy.E(u[0])) + math.fsum(dens * dt)


# ---------------------------------------------------------------------------
# fluctuation-dissipation: anisotropic noise versus mobility


def _face_average(c, grid):
    c = np.asarray(c, dtype=float)
    if grid.periodic:
        return 0.5 * (c + np.roll(c, -1))
    return 0.5 * (c[:-1] + c[1:])


def _sigma2_cells(sigma2, grid):
    s = np.broadcast_to(np.asarray(sigma2, dtype=float), (grid.n_cells,)).copy()
    if np.any(s <= 0):
        raise ValueError("sigma2 must be positive")
    return s


def _drift_flux(rho: GridMeasure, psi, phi, A: float, s2: np.ndarray):
    """Face flux ``J`` of ``b = div(sigma2 grad rho + A rho grad V)`` and the face mobility.

    The diffusive part uses ``sigma2 rho grad(log rho)`` so that, for
    constant ``sigma2/A``, ``J / D`` is an exact discrete gradient.
    """
    grid = rho.grid
    f = rho.density
    if np.any(f <= 0):
        raise ValueError("mobility vanishes: densities must be strictly positive")
    V = np.zeros(grid.n_cells) if psi is None else np.asarray(psi, dtype=float).copy()
    if phi is not None and np.any(np.asarray(phi) != 0):
        V = V + convolution_matrix(phi, grid) @ rho.weights
    f_face = _face_average(f, grid)
    D = f_face * _face_average(s2, grid)
    J = D * face_gradient(np.log(f), grid) + A * f_face * face_gradient(V, grid)
    return J, MobilityField(grid, D)


def cross_term(path: MeasurePath, psi, phi, A: float, sigma2) -> float:
    """``int (d_t rho, -div sigma2 grad rho - div rho A grad V)_{D,*} dt`` with ``D = rho sigma2``.

    ``sigma2`` may be a scalar or a cellwise function.
    """
    if not A > 0:
        raise ValueError("A must be positive")
    s2 = _sigma2_cells(sigma2, path.grid)
    terms = []
    for _, dt, mid, v in _intervals(path):
        J, D = _drift_flux(mid, psi, phi, A, s2)
        terms.append(dual_inner(v, -face_divergence(J, mid.grid), D) * dt)
    return math.fsum(terms)


def linear_path(rho0: GridMeasure, rho1: GridMeasure, steps: int, T: float = 1.0) -> MeasurePath:
    times = np.linspace(0.0, T, steps + 1)
    sl = tuple(GridMeasure(rho0.grid, (1 - s) * rho0.weights + s * rho1.weights) for s in times / T)
    return MeasurePath(times, sl)


def fdt_gap(path: MeasurePath, psi, phi, A: float, sigma2, reference: MeasurePath | None = None) -> float:
    """Path dependence of the cross term.

    Compares the cross term along ``path`` with the one along ``reference``
    (default: the straight line between the same endpoints, on the same time
    grid).  A vanishing gap for all path pairs means the cross term is an
    exact differential.
    """
    if reference is None:
        reference = linear_path(path.slices[0], path.slices[-1], len(path) - 1, path.times[-1] - path.times[0])
    for a, b in ((path.slices[0], reference.slices[0]), (path.slices[-1], reference.slices[-1])):
        if np.max(np.abs(a.weights - b.weights)) > 1e-12:
            raise ValueError("paths must share their endpoints")
    return abs(cross_term(path, psi, phi, A, sigma2) - cross_term(reference, psi, phi, A, sigma2))


def rate_fk(path: MeasurePath, psi, phi, A: float, sigma2) -> float:
    """``1/2 int ||d_t rho - div sigma2 grad rho - div rho A grad V||^2_{D,*} dt``."""
    s2 = _sigma2_cells(sigma2, path.grid)
    terms = []
    for _, dt, mid, v in _intervals(path):
        J, D = _drift_flux(mid, psi, phi, A, s2)
        terms.append(0.5 * dual_norm_sq(v - face_divergence(J, mid.grid), D) * dt)
    return math.fsum(terms)
