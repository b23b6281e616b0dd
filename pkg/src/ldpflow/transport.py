"""
Quadratic Wasserstein distances in 1-D and the Wasserstein metric tensor.

Three independent routes to the squared distance are provided:

* `wasserstein_quantile` integrates the squared gap between quantile
  functions exactly (piecewise-linear quantiles for cellwise-constant
  densities, step quantiles for atoms at the cell centers);
* `wasserstein_lp` solves the coupling linear program on small supports;
* `assignment_cost` sorts two particle clouds.

The metric tensor is realised by a conservative finite-volume elliptic
problem ``-(D p')' = s`` on cell faces; in 1-D the flux is a running sum of
``s`` so the "solve" is exact and O(n).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog, minimize_scalar

from .measures import Grid, GridMeasure, MeasurePath, ParticleCloud

MASS_TOL = 1e-10
TANGENT_TOL = 1e-10
LP_MAX_ATOMS = 64


@dataclass(frozen=True)
class MobilityField:
    """Mobility ``D`` evaluated at the cell faces.

    Torus grids have ``n`` faces (face ``i`` sits between cells ``i`` and
    ``i+1 mod n``); interval grids have the ``n-1`` interior faces, the walls
    carry no flux.
    """

    grid: Grid
    face_values: np.ndarray

    def __post_init__(self):
        v = np.array(self.face_values, dtype=float)
        nf = n_faces(self.grid)
        if v.shape != (nf,):
            raise ValueError(f"expected {nf} face values, got {v.shape}")
        if np.any(v < 0):
            raise ValueError("mobility must be nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "face_values", v)

    @classmethod
    def from_cells(cls, grid: Grid, cell_values) -> "MobilityField":
        """Face average ``(D_i + D_{i+1}) / 2`` of a cellwise mobility."""
        c = np.asarray(cell_values, dtype=float)
        if grid.periodic:
            return cls(grid, 0.5 * (c + np.roll(c, -1)))
        return cls(grid, 0.5 * (c[:-1] + c[1:]))

    @classmethod
    def constant(cls, grid: Grid, value: float = 1.0) -> "MobilityField":
        return cls(grid, np.full(n_faces(grid), float(value)))

    def scaled(self, c: float) -> "MobilityField":
        return MobilityField(self.grid, self.face_values * c)


def n_faces(grid: Grid) -> int:
    return grid.n_cells if grid.periodic else grid.n_cells - 1


def face_gradient(xi: np.ndarray, grid: Grid) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if grid.periodic:
        return (np.roll(xi, -1) - xi) / grid.dx
    return np.diff(xi) / grid.dx


def face_divergence(flux: np.ndarray, grid: Grid) -> np.ndarray:
    """Cellwise divergence of a face flux (zero flux through interval walls)."""
    if grid.periodic:
        return (flux - np.roll(flux, 1)) / grid.dx
    padded = np.concatenate([[0.0], flux, [0.0]])
    return np.diff(padded) / grid.dx


def weighted_laplacian(xi: np.ndarray, D: MobilityField) -> np.ndarray:
    """``div(D grad xi)`` with the face stencil shared by every module."""
    return face_divergence(D.face_values * face_gradient(xi, D.grid), D.grid)


# ---------------------------------------------------------------------------
# quantile route


def _density_knots(m: GridMeasure):
    """CDF knots ``(F_k, x_k)``; the quantile is linear between knots."""
    F = np.concatenate([[0.0], np.cumsum(m.weights)])
    return F, m.grid.edges.astype(float)


def _atom_steps(positions, weights):
    """Step quantile: value ``positions[j]`` on ``(F_j, F_{j+1}]``."""
    order = np.argsort(positions, kind="stable")
    x = np.asarray(positions, dtype=float)[order]
    w = np.asarray(weights, dtype=float)[order]
    return np.concatenate([[0.0], np.cumsum(w)]), x


def _eval_linear(F, X, u, seg):
    """Quantile value at ``u`` inside knot segment ``seg`` (linear piece)."""
    dF = F[seg + 1] - F[seg]
    return X[seg] + (u - F[seg]) * (X[seg + 1] - X[seg]) / dF


def _segment_index(F, mids):
    j = np.searchsorted(F, mids, side="right") - 1
    return np.clip(j, 0, F.size - 2)


def _quantile_values(rep, u_lo, u_hi, mids):
    """Left/right values of a quantile function on each merged segment."""
    kind, F, X = rep
    j = _segment_index(F, mids)
    if kind == "atoms":
        q = X[j]
        return q, q
    return _eval_linear(F, X, u_lo, j), _eval_linear(F, X, u_hi, j)


def _merged_cost(rep0, rep1, total, shift=0.0):
    """``int_0^total |Q0(u) - Q1(u + shift)|^2 du`` computed exactly."""
    F1s = rep1[1] - shift
    inner = F1s[(F1s > 0) & (F1s < total)]
    u = np.unique(np.concatenate([[0.0, total], rep0[1][(rep0[1] > 0) & (rep0[1] < total)], inner]))
    lo, hi = u[:-1], u[1:]
    keep = hi > lo
    lo, hi = lo[keep], hi[keep]
    mids = 0.5 * (lo + hi)
    a0, b0 = _quantile_values(rep0, lo, hi, mids)
    shifted = (rep1[0], F1s, rep1[2])
    a1, b1 = _quantile_values(shifted, lo, hi, mids)
    ga, gb = a0 - a1, b0 - b1
    return math.fsum((hi - lo) * (ga * ga + ga * gb + gb * gb) / 3.0)


def _periodic_extension(rep, total, L, copies=2):
    """Lift a quantile function to ``Q(u + total) = Q(u) + L`` over a few periods."""
    kind, F, X = rep
    ks = range(-copies, copies + 1)
    Fe = np.concatenate([[F[0] - copies * total]] + [F[1:] + k * total for k in ks])
    if kind == "atoms":
        Xe = np.concatenate([X + k * L for k in ks])
    else:
        Xe = np.concatenate([[X[0] - copies * L]] + [X[1:] + k * L for k in ks])
    return kind, Fe, Xe


def _circle_cost(rep0, rep1, total, L):
    ext = _periodic_extension(rep1, total, L)

    def cost(theta):
        return _merged_cost(rep0, ext, total, shift=-theta)

    # the shifted quantile cost is convex in the shift
    if rep0[0] == "atoms":
        # piecewise linear: the minimum sits on a shift aligning two CDF knots
        kinks = (rep0[1][:, None] - ext[1][None, :]).ravel()
        kinks = np.unique(kinks[(kinks >= -total) & (kinks <= total)])
        lo, hi = 0, kinks.size - 1
        while hi - lo > 2:
            m1 = lo + (hi - lo) // 3
            m2 = hi - (hi - lo) // 3
            if cost(kinks[m1]) <= cost(kinks[m2]):
                hi = m2
            else:
                lo = m1
        return min(cost(t) for t in kinks[lo:hi + 1])
    thetas = np.linspace(-total, total, 65)
    vals = np.array([cost(t) for t in thetas])
    k = int(np.argmin(vals))
    a, b = thetas[max(k - 1, 0)], thetas[min(k + 1, thetas.size - 1)]
    res = minimize_scalar(cost, bounds=(a, b), method="bounded", options={"xatol": 1e-14 * max(1.0, total)})
    return min(float(res.fun), float(vals[k]))


def _check_pair(r0: GridMeasure, r1: GridMeasure) -> float:
    r0.grid.check_same(r1.grid)
    m0, m1 = r0.mass, r1.mass
    if m0 <= 0 or m1 <= 0:
        raise ValueError("empty measure")
    if abs(m0 - m1) > MASS_TOL * max(1.0, m0):
        raise ValueError("unbalanced: measures must have equal mass")
    return m0


def wasserstein_quantile(rho0: GridMeasure, rho1: GridMeasure, representation: str = "density") -> float:
    """Squared quadratic Wasserstein distance computed from quantile functions.

    ``representation="density"`` treats each cell mass as spread uniformly
    over the cell (piecewise-linear CDF); ``"atoms"`` puts it at the cell
    center.  On the torus the optimal lift of the second quantile function is
    found by minimizing the (convex) shifted cost.  For measures of total
    mass ``M`` the result is ``M`` times the distance of the normalized pair.
    """
    total = _check_pair(rho0, rho1)
    if representation == "density":
        rep0 = ("linear",) + _density_knots(rho0)
        rep1 = ("linear",) + _density_knots(rho1)
    elif representation == "atoms":
        c = rho0.grid.centers
        rep0 = ("atoms",) + _atom_steps(c, rho0.weights)
        rep1 = ("atoms",) + _atom_steps(c, rho1.weights)
    else:
        raise ValueError(f"unknown representation {representation!r}")
    # equalize roundoff in the totals so the last segment is well defined
    rep1 = (rep1[0], rep1[1] * (total / rep1[1][-1]), rep1[2])
    if rho0.grid.periodic:
        return _circle_cost(rep0, rep1, total, rho0.grid.length)
    return _merged_cost(rep0, rep1, total)


def wasserstein_atoms(x, a, y, b, period: float | None = None) -> float:
    """Quantile-route squared distance between two weighted point sets."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ta, tb = a.sum(), b.sum()
    if abs(ta - tb) > MASS_TOL * max(1.0, ta):
        raise ValueError("unbalanced: measures must have equal mass")
    rep0 = ("atoms",) + _atom_steps(np.asarray(x, dtype=float), a)
    rep1 = ("atoms",) + _atom_steps(np.asarray(y, dtype=float), b * (ta / tb))
    if period is not None:
        x0 = np.mod(rep0[2], period)
        rep0 = ("atoms",) + _atom_steps(x0, np.diff(rep0[1]))
        y0 = np.mod(rep1[2], period)
        rep1 = ("atoms",) + _atom_steps(y0, np.diff(rep1[1]))
        return _circle_cost(rep0, rep1, ta, period)
    return _merged_cost(rep0, rep1, ta)


# ---------------------------------------------------------------------------
# linear-programming oracle


def _lp_cost(x, y, period):
    d = np.abs(x[:, None] - y[None, :])
    if period is not None:
        d = np.minimum(d, period - d)
    return d * d


def coupling_lp(x, a, y, b, period: float | None = None):
    """Optimal value and plan of the discrete transport LP (HiGHS simplex)."""
    x, a, y, b = (np.asarray(v, dtype=float) for v in (x, a, y, b))
    if x.size + y.size > LP_MAX_ATOMS:
        raise ValueError("LP oracle limited to small supports")
    if abs(a.sum() - b.sum()) > MASS_TOL * max(1.0, a.sum()):
        raise ValueError("unbalanced: measures must have equal mass")
    n, m = x.size, y.size
    C = _lp_cost(x, y, period)
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([a, b * (a.sum() / b.sum())])
    res = linprog(
        C.ravel(), A_eq=A_eq[:-1], b_eq=b_eq[:-1], bounds=(0, None), method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise RuntimeError(f"LP solver failed: {res.message}")
    plan = res.x.reshape(n, m)
    return math.fsum((plan * C).ravel()), plan


def wasserstein_lp(rho0: GridMeasure, rho1: GridMeasure) -> float:
    """Squared distance of the atoms-at-centers measures via the coupling LP.

    Only the support cells enter the program; at most 64 atoms in total.
    """
    _check_pair(rho0, rho1)
    c = rho0.grid.centers
    s0 = rho0.weights > 0
    s1 = rho1.weights > 0
    if s0.sum() + s1.sum() > LP_MAX_ATOMS:
        raise ValueError("LP oracle limited to small supports")
    period = rho0.grid.length if rho0.grid.periodic else None
    value, _ = coupling_lp(c[s0], rho0.weights[s0], c[s1], rho1.weights[s1], period)
    return value


# ---------------------------------------------------------------------------
# particle assignment


def assignment_cost(x: ParticleCloud, y: ParticleCloud) -> float:
    """``(1/n) min_sigma sum |x_i - y_sigma(i)|^2`` via monotone matching.

    On a torus domain the optimal matching is monotone up to a cyclic shift
    and a common lift, both of which are searched exhaustively.
    """
    if len(x) != len(y):
        raise ValueError("assignment needs equal particle counts")
    n = len(x)
    if n == 0:
        raise ValueError("empty cloud")
    xs = np.sort(x.positions)
    ys = np.sort(y.positions)
    if not x.domain.periodic:
        return math.fsum((xs - ys) ** 2) / n
    L = x.domain.length
    xs = np.mod(xs, L)
    ys = np.sort(np.mod(ys, L))
    xs = np.sort(xs)
    best = math.inf
    idx = np.arange(n)
    for s in range(n):
        j = idx + s
        lifted = ys[j % n] + L * (j // n)
        d = lifted - xs
        k0 = math.floor(d.mean() / L)
        for k in (k0 - 1, k0, k0 + 1, k0 + 2):
            best = min(best, math.fsum((d - k * L) ** 2))
    return best / n


def assignment_bruteforce(x, y, period: float | None = None) -> float:
    """Enumerate all permutations (tiny n only); independent check of sorting."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    if n > 8:
        raise ValueError("brute force limited to n <= 8")
    C = _lp_cost(x, y, period)
    return min(sum(C[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))) / n


# ---------------------------------------------------------------------------
# metric tensor


def _tangent_check(s: np.ndarray, grid: Grid):
    total = math.fsum(s) * grid.dx
    scale = max(1.0, math.fsum(np.abs(s)) * grid.dx)
    if abs(total) > TANGENT_TOL * scale:
        raise ValueError(f"not a tangent vector: sum(s) dx = {total:.3e}")


def _fluxes(s: np.ndarray, D: MobilityField) -> np.ndarray:
    """Face values of ``D p'`` for the solution of ``-(D p')' = s``."""
    grid = D.grid
    d = D.face_values
    if np.any(d <= 0):
        raise ValueError("mobility vanishes on a face")
    S = np.cumsum(s) * grid.dx
    if grid.periodic:
        # loop closure: sum of p' dx over all faces vanishes
        C = math.fsum(S / d) / math.fsum(1.0 / d)
        return C - S
    return -S[:-1]


def solve_potential(s, D: MobilityField) -> np.ndarray:
    """Mean-zero ``p`` with ``-(D p')' = s`` (discrete, conservative)."""
    s = np.asarray(s, dtype=float)
    grid = D.grid
    _tangent_check(s, grid)
    grad = _fluxes(s - s.mean(), D) / D.face_values
    steps = grad * grid.dx
    p = np.concatenate([[0.0], np.cumsum(steps[: grid.n_cells - 1])])
    return p - p.mean()


def dual_norm_sq(s, D: MobilityField) -> float:
    """``||s||^2_{D,*} = sum_faces D |p'|^2 dx`` where ``-(D p')' = s``."""
    s = np.asarray(s, dtype=float)
    if s.shape != (D.grid.n_cells,):
        raise ValueError("tangent vector does not match the grid")
    _tangent_check(s, D.grid)
    J = _fluxes(s - s.mean(), D)
    return math.fsum(J * J / D.face_values) * D.grid.dx


def dual_inner(s1, s2, D: MobilityField) -> float:
    """Inner product ``sum_faces D p1' p2' dx`` inducing `dual_norm_sq`."""
    s1 = np.asarray(s1, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    _tangent_check(s1, D.grid)
    _tangent_check(s2, D.grid)
    J1 = _fluxes(s1 - s1.mean(), D)
    J2 = _fluxes(s2 - s2.mean(), D)
    return math.fsum(J1 * J2 / D.face_values) * D.grid.dx


def primal_norm_sq(xi, D: MobilityField) -> float:
    """``||xi||^2_D = sum_faces D |xi'|^2 dx``."""
    g = face_gradient(np.asarray(xi, dtype=float), D.grid)
    return math.fsum(D.face_values * g * g) * D.grid.dx


def bb_action(path: MeasurePath) -> float:
    """Discrete kinetic action ``sum_k ||(rho_{k+1}-rho_k)/dt||^2_{rho_{k+1/2},*} dt``."""
    f = path.densities()
    if np.any(f <= 0):
        raise ValueError("mobility vanishes: path slices must be strictly positive")
    dt = path.dt
    grid = path.grid
    terms = []
    for k in range(len(path) - 1):
        D = MobilityField.from_cells(grid, 0.5 * (f[k] + f[k + 1]))
        terms.append(dual_norm_sq((f[k + 1] - f[k]) / dt, D) * dt)
    return math.fsum(terms)


def displacement_interpolation(rho0: GridMeasure, rho1: GridMeasure, t: float) -> GridMeasure:
    """Point ``t`` of the 1-D Wasserstein geodesic, projected back onto the grid.

    Quantile functions are interpolated linearly; the resulting CDF is
    evaluated at the cell edges.  Interval topology only.
    """
    if rho0.grid.periodic:
        raise ValueError("displacement interpolation implemented on the interval only")
    total = _check_pair(rho0, rho1)
    F0, X0 = _density_knots(rho0)
    F1, X1 = _density_knots(rho1)
    F1 = F1 * (total / F1[-1])
    u = np.unique(np.concatenate([F0, F1]))
    u = u[(u >= 0) & (u <= total)]
    lo, hi = u[:-1], u[1:]
    keep = hi > lo
    lo, hi = lo[keep], hi[keep]
    mids = 0.5 * (lo + hi)
    a0, b0 = _quantile_values(("linear", F0, X0), lo, hi, mids)
    a1, b1 = _quantile_values(("linear", F1, X1), lo, hi, mids)
    qa = (1 - t) * a0 + t * a1
    qb = (1 - t) * b0 + t * b1
    xq = np.empty(2 * lo.size)
    uq = np.empty(2 * lo.size)
    xq[0::2], xq[1::2] = qa, qb
    uq[0::2], uq[1::2] = lo, hi
    xq = np.maximum.accumulate(xq)
    Fe = np.interp(rho0.grid.edges, xq, uq, left=0.0, right=total)
    Fe[0], Fe[-1] = 0.0, total
    w = np.maximum(np.diff(Fe), 0.0)
    return GridMeasure(rho0.grid, w * (total / w.sum()))


def geodesic_path(rho0: GridMeasure, rho1: GridMeasure, steps: int) -> MeasurePath:
    times = np.linspace(0.0, 1.0, steps + 1)
    sl = [rho0] + [displacement_interpolation(rho0, rho1, t) for t in times[1:-1]] + [rho1]
    return MeasurePath(times, tuple(sl))
