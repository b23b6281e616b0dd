"""
Minimizing-movement steps in quantile coordinates.

A positive density on an interval ``[0, L]`` is parametrized by ``m + 1``
CDF knots ``Z_0 = 0 < Z_1 < ... < Z_m = L`` carrying mass ``M/m`` each and
constant density in between.  In these coordinates

* the squared Wasserstein distance to another knot measure is the exact
  integral of the squared gap between piecewise-linear quantile functions,
  a quadratic form with the P1 mass matrix ``(M/m) * tridiag(1, 4, 1) / 6``;
* the entropy is ``-(M/m) sum log(m dZ_j / M)``, convex in ``Z``;
* potential energies are evaluated at the cell midpoints.

Each step is solved by damped Newton with a backtracking line search that
keeps the knots strictly increasing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline, PchipInterpolator
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve

from .measures import EnergySpec, Grid, GridMeasure, MeasurePath, boltzmann_entropy
from .transport import wasserstein_quantile

NEWTON_TOL = 1e-10
NEWTON_MAXITER = 200


class JKOError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuantileDensity:
    """Knot parametrization of a positive density on ``[0, length]``."""

    knots: np.ndarray
    mass: float = 1.0

    def __post_init__(self):
        z = np.array(self.knots, dtype=float)
        if z.ndim != 1 or z.size < 3:
            raise ValueError("need at least two quantile cells")
        if np.any(np.diff(z) <= 0):
            raise ValueError("knots must be strictly increasing")
        z.setflags(write=False)
        object.__setattr__(self, "knots", z)

    @property
    def m_quantiles(self) -> int:
        return self.knots.size - 1

    @property
    def positions(self) -> np.ndarray:
        """Midpoints of the quantile cells."""
        return 0.5 * (self.knots[1:] + self.knots[:-1])

    @classmethod
    def from_grid(cls, rho: GridMeasure, m: int | None = None) -> "QuantileDensity":
        if rho.grid.periodic:
            raise ValueError("quantile parametrization needs an interval grid")
        m = rho.grid.n_cells if m is None else int(m)
        if np.any(rho.weights <= 0):
            raise ValueError("quantile parametrization needs a strictly positive density")
        F = np.concatenate([[0.0], np.cumsum(rho.weights)])
        M = F[-1]
        z = np.interp(np.arange(m + 1) * (M / m), F, rho.grid.edges)
        z[0], z[-1] = 0.0, rho.grid.length
        return cls(z, M)

    def to_grid(self, grid: Grid) -> GridMeasure:
        """Cell masses from a monotone cubic interpolant of the CDF through the knots.

        A linear CDF (constant density per quantile cell) would leave an
        O(1/m) sawtooth in L1 after re-gridding; the monotone cubic keeps
        positivity and the total mass while removing it.
        """
        m = self.m_quantiles
        F = PchipInterpolator(self.knots, np.arange(m + 1) * (self.mass / m))(grid.edges)
        F[0], F[-1] = 0.0, self.mass
        w = np.diff(F)
        if w.min() < -1e-15 * self.mass:
            raise JKOError("nonmonotone CDF reconstruction")
        return GridMeasure(grid, np.abs(w))

    def entropy(self) -> float:
        w = self.mass / self.m_quantiles
        return -w * math.fsum(np.log(np.diff(self.knots) / w))


def _w2_knots(a: np.ndarray, w: float) -> float:
    """Exact squared distance for knot displacement ``a`` (endpoints included)."""
    return w * math.fsum((a[:-1] ** 2 + a[:-1] * a[1:] + a[1:] ** 2) / 3.0)


class _Objective:
    """``(1/2h) W2^2(Z, Z_prev) + E(Z)`` with gradient and Hessian in the interior knots."""

    def __init__(self, z_prev: np.ndarray, mass: float, h: float, spec: EnergySpec, grid: Grid):
        if spec.kind == "mixing_entropy":
            raise ValueError("quantile JKO supports entropy and free_energy only")
        self.z_prev = z_prev
        self.m = z_prev.size - 1
        self.w = mass / self.m
        self.h = h
        self.kT = spec.kT
        self.psi = None
        self.phi = None
        if spec.kind == "free_energy":
            if spec.potential is not None and np.any(spec.potential != 0):
                self.psi = _spline(grid.centers, spec.potential_on(grid), grid.length)
            if spec.interaction is not None and np.any(spec.interaction != 0):
                r = np.arange(grid.n_cells) * grid.dx
                vals = np.asarray(spec.interaction, dtype=float)
                self.phi = CubicSpline(np.concatenate([-r[:0:-1], r]), np.concatenate([vals[:0:-1], vals]))

    def full(self, zi):
        return np.concatenate([[self.z_prev[0]], zi, [self.z_prev[-1]]])

    def energy(self, z) -> float:
        dz = np.diff(z)
        e = -self.w * math.fsum(np.log(dz / self.w))
        c = 0.5 * (z[1:] + z[:-1])
        pot = 0.0
        if self.psi is not None:
            pot += self.w * math.fsum(self.psi(c))
        if self.phi is not None:
            pot += 0.5 * self.w * self.w * math.fsum(self.phi(c[:, None] - c[None, :]).ravel())
        return e + pot / self.kT

    def value(self, zi) -> float:
        z = self.full(zi)
        return _w2_knots(z - self.z_prev, self.w) / (2 * self.h) + self.energy(z)

    def grad_hess(self, zi):
        z = self.full(zi)
        m, w = self.m, self.w
        a = z - self.z_prev
        dz = np.diff(z)
        k = m - 1
        # distance: (w/3) * a^T tridiag(1/2, 2, 1/2) a over the interior, scaled by 1/2h
        g = (w / 6.0) * (4 * a[1:-1] + a[:-2] + a[2:]) / self.h
        H = np.zeros((k, k))
        idx = np.arange(k)
        H[idx, idx] = (w / 6.0) * 4 / self.h
        H[idx[:-1], idx[1:]] = (w / 6.0) / self.h
        H[idx[1:], idx[:-1]] = (w / 6.0) / self.h
        # entropy: -w sum log dz_j
        inv = 1.0 / dz
        g += -w * (inv[:-1] - inv[1:])
        inv2 = inv * inv
        H[idx, idx] += w * (inv2[:-1] + inv2[1:])
        H[idx[:-1], idx[1:]] -= w * inv2[1:-1]
        H[idx[1:], idx[:-1]] -= w * inv2[1:-1]
        c = 0.5 * (z[1:] + z[:-1])
        if self.psi is not None or self.phi is not None:
            # d c / d Z_interior: c_j depends on Z_j and Z_{j-1}
            gc = np.zeros(m)
            Hc = np.zeros((m, m))
            if self.psi is not None:
                gc += w * self.psi(c, 1)
                Hc[np.arange(m), np.arange(m)] += w * self.psi(c, 2)
            if self.phi is not None:
                diff = c[:, None] - c[None, :]
                d1 = self.phi(diff, 1)
                d2 = self.phi(diff, 2)
                np.fill_diagonal(d1, 0.0)
                np.fill_diagonal(d2, 0.0)
                gc += w * w * d1.sum(axis=1)
                Hc += w * w * (np.diag(d2.sum(axis=1)) - d2)
            B = np.zeros((m, k))
            B[idx, idx] = 0.5
            B[idx + 1, idx] = 0.5
            g += (B.T @ gc) / self.kT
            H += (B.T @ Hc @ B) / self.kT
        return g, H


def _spline(x, y, length):
    return CubicSpline(x, y, bc_type="not-a-knot", extrapolate=True)


def _newton_solve(H, g):
    try:
        return -cho_solve(cho_factor(H), g)
    except LinAlgError:
        # indefinite (nonconvex potential): shift the spectrum
        lam_min = np.linalg.eigvalsh(H)[0]
        shift = -lam_min + 1e-8 * max(1.0, np.abs(H).max())
        return -solve(H + shift * np.eye(H.shape[0]), g, assume_a="sym")


def _minimize(obj: _Objective, z0: np.ndarray):
    zi = z0[1:-1].copy()
    f = obj.value(zi)
    for it in range(NEWTON_MAXITER):
        g, H = obj.grad_hess(zi)
        step = _newton_solve(H, g)
        decrement = -float(g @ step)
        if decrement <= NEWTON_TOL:
            return obj.full(zi), it
        t = 1.0
        while True:
            trial = zi + t * step
            z = obj.full(trial)
            if np.all(np.diff(z) > 0):
                ft = obj.value(trial)
                if ft <= f - 0.25 * t * decrement:
                    break
            t *= 0.5
            if t < 1e-14:
                if decrement < 1e-8:
                    return obj.full(zi), it
                raise JKOError("step too aggressive; reduce h or refine")
        zi, f = trial, ft
    raise JKOError(f"Newton did not converge in {NEWTON_MAXITER} iterations")


def k_h_value(rho1: GridMeasure, rho0: GridMeasure, h: float) -> float:
    """``d(rho0, rho1)^2 / 4h + Ent(rho1)/2 - Ent(rho0)/2``."""
    if not h > 0:
        raise ValueError("h must be positive")
    return wasserstein_quantile(rho0, rho1) / (4 * h) + 0.5 * boltzmann_entropy(rho1) - 0.5 * boltzmann_entropy(rho0)


def jko_step_quantile(q: QuantileDensity, h: float, spec: EnergySpec, grid: Grid) -> QuantileDensity:
    """One minimizing-movement step acting directly on knots."""
    if not h > 0:
        raise ValueError("h must be positive")
    obj = _Objective(q.knots, q.mass, h, spec, grid)
    z, _ = _minimize(obj, q.knots)
    return QuantileDensity(z, q.mass)


def jko_objective(q: QuantileDensity, q_prev: QuantileDensity, h: float, spec: EnergySpec, grid: Grid) -> float:
    obj = _Objective(q_prev.knots, q_prev.mass, h, spec, grid)
    return obj.value(q.knots[1:-1])


def quantile_energy(q: QuantileDensity, spec: EnergySpec, grid: Grid) -> float:
    return _Objective(q.knots, q.mass, 1.0, spec, grid).energy(q.knots)


def jko_step(rho0: GridMeasure, h: float, spec: EnergySpec, m: int | None = None) -> GridMeasure:
    """Approximate minimizer of ``rho -> d(rho, rho0)^2 / 2h + E(rho)``.

    Works on interval grids with strictly positive ``rho0``; the mass of
    ``rho0`` is preserved exactly by the parametrization.
    """
    q = QuantileDensity.from_grid(rho0, m)
    return jko_step_quantile(q, h, spec, rho0.grid).to_grid(rho0.grid)


def jko_flow(rho0: GridMeasure, h: float, steps: int, spec: EnergySpec, m: int | None = None,
             return_energies: bool = False):
    """Iterate `jko_step` in quantile coordinates, recording grid projections.

    With ``return_energies`` the energies of the iterates (in quantile
    coordinates, where the minimization happens) are returned as well; they
    are nonincreasing.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    grid = rho0.grid
    q = QuantileDensity.from_grid(rho0, m)
    slices = [rho0]
    energies = [quantile_energy(q, spec, grid)]
    for _ in range(steps):
        q = jko_step_quantile(q, h, spec, grid)
        slices.append(q.to_grid(grid))
        energies.append(quantile_energy(q, spec, grid))
    path = MeasurePath(np.arange(steps + 1) * h, tuple(slices))
    if return_energies:
        return path, np.array(energies)
    return path


# ---------------------------------------------------------------------------
# diffusion with decay


def _survival_weights(lam: float, h: float):
    p = math.exp(-lam * h)
    q = 1.0 - p
    if lam > 0 and q == 1.0:
        raise JKOError("decay step too large: 1 - exp(-lambda h) rounds to 1")
    return p, q


def _split_cost(theta, p, q):
    """Per unit mass cost of keeping a fraction ``theta`` alive."""
    out = np.zeros_like(theta)
    t = theta
    with np.errstate(divide="ignore", invalid="ignore"):
        out += np.where(t > 0, t * np.log(t), 0.0) + np.where(t < 1, (1 - t) * np.log1p(-t), 0.0)
        out -= t * math.log(p) if p > 0 else 0.0
        if q > 0:
            out -= (1 - t) * math.log(q)
    return out


def _inner_split(n: int, p: float, q: float) -> np.ndarray:
    """Bisection on the derivative of the cellwise split cost."""
    if q == 0.0:
        return np.ones(n)
    lo = np.zeros(n)
    hi = np.ones(n)
    lp, lq = math.log(p), math.log(q)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        d = np.log(mid) - np.log1p(-mid) - lp + lq
        lo = np.where(d < 0, mid, lo)
        hi = np.where(d < 0, hi, mid)
        if np.all(hi - lo <= 1e-16):
            break
    return 0.5 * (lo + hi)


def _free_energy_any_mass(rho: GridMeasure, psi: np.ndarray) -> float:
    if rho.mass == 0.0:
        return 0.0
    return boltzmann_entropy(rho) + math.fsum(rho.weights * psi)


def decay_objective(rho: GridMeasure, rho_nd: GridMeasure, rho_prev: GridMeasure, h: float, psi, lam: float) -> float:
    """Joint objective of the decay scheme for a candidate split ``(rho, rho_nd)``."""
    p, q = _survival_weights(lam, h)
    psi = np.zeros(rho.grid.n_cells) if psi is None else np.asarray(psi, dtype=float)
    bar = GridMeasure(rho.grid, rho.weights + rho_nd.weights)
    F = lambda r: _free_energy_any_mass(r, psi)  # noqa: E731
    val = -0.5 * F(bar) - 0.5 * F(rho_prev) + wasserstein_quantile(bar, rho_prev) / (4 * h)
    val += F(rho) + F(rho_nd) - rho.mass * math.log(p)
    if rho_nd.mass > 0:
        val -= rho_nd.mass * math.log(q)
    return val


def _decay_sweeps(q_prev: QuantileDensity, h: float, psi: np.ndarray, lam: float, grid: Grid,
                  rho_prev: GridMeasure):
    """Alternate the outer transport step and the inner cellwise split."""
    p, q = _survival_weights(lam, h)
    theta = np.full(grid.n_cells, 0.5) if q > 0 else np.ones(grid.n_cells)
    prev_obj = math.inf
    for sweeps in range(1, 51):
        psi_eff = psi + 2.0 * _split_cost(theta, p, q)
        q_bar = jko_step_quantile(q_prev, h, EnergySpec("free_energy", potential=psi_eff), grid)
        theta = _inner_split(grid.n_cells, p, q)
        bar = q_bar.to_grid(grid)
        rho = GridMeasure(grid, theta * bar.weights)
        rho_nd = GridMeasure(grid, bar.weights - rho.weights)
        obj = decay_objective(rho, rho_nd, rho_prev, h, psi, lam)
        if abs(obj - prev_obj) <= 1e-10:
            break
        prev_obj = obj
    return q_bar, theta, rho, rho_nd, sweeps, obj


def decay_step(rho_prev: GridMeasure, h: float, psi, lam: float, m: int | None = None,
               return_info: bool = False):
    """One step of the diffusion-with-decay minimization.

    Returns ``(rho, rho_nd)``: the surviving and the decayed part.  The outer
    problem over ``rho_bar = rho + rho_nd`` is a minimizing-movement step whose
    potential picks up the cellwise split cost; the inner problem (split of
    each cell) is solved by bisection.  The two are alternated until the joint
    objective changes by at most 1e-10.
    """
    if not h > 0 or lam < 0:
        raise ValueError("need h > 0 and lambda >= 0")
    grid = rho_prev.grid
    if rho_prev.mass > 1 + 1e-12:
        raise ValueError("decay step needs total mass at most one")
    if np.any(rho_prev.weights <= 0):
        raise ValueError("decay step needs a strictly positive state")
    psi = np.zeros(grid.n_cells) if psi is None else np.asarray(psi, dtype=float)
    q_prev = QuantileDensity.from_grid(rho_prev, m)
    _, _, rho, rho_nd, sweeps, obj = _decay_sweeps(q_prev, h, psi, lam, grid, rho_prev)
    if not return_info:
        return rho, rho_nd
    p, _ = _survival_weights(lam, h)
    seq = jko_step_quantile(q_prev, h, EnergySpec("free_energy", potential=psi), grid).to_grid(grid)
    info = {
        "sweeps": sweeps,
        "objective": obj,
        "sequential_gap": float(np.abs(seq.weights * p - rho.weights).sum()),
    }
    return rho, rho_nd, info


def decay_flow(rho0: GridMeasure, h: float, steps: int, psi, lam: float, m: int | None = None) -> MeasurePath:
    """Iterate `decay_step`, carrying the surviving part in quantile coordinates.

    The optimal split keeps the same fraction of every cell, so the survivor
    shares the knots of ``rho_bar`` and only its mass shrinks; staying in knot
    space avoids a grid round trip per step.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    grid = rho0.grid
    psi = np.zeros(grid.n_cells) if psi is None else np.asarray(psi, dtype=float)
    q = QuantileDensity.from_grid(rho0, m)
    rho = rho0
    slices = [rho0]
    for _ in range(steps):
        q_bar, theta, rho, _, _, _ = _decay_sweeps(q, h, psi, lam, grid, rho)
        if np.ptp(theta) > 1e-14:
            raise JKOError("nonuniform decay split cannot be carried in quantile coordinates")
        q = QuantileDensity(q_bar.knots, q_bar.mass * float(theta[0]))
        slices.append(rho)
    return MeasurePath(np.arange(steps + 1) * h, tuple(slices))
