"""
Discrete measures on a uniform 1-D grid and the entropy-type functionals.

Measures are cellwise-constant densities: a `GridMeasure` stores the mass per
cell, and the density in cell ``i`` is ``weights[i] / dx``.  Every integral is
a rectangle rule on the cells, so entropies, convolutions and transport costs
all see the same object.

The convention ``0 log 0 = 0`` is used throughout; ``+inf`` is a legal value
of entropy-type functionals.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.linalg import circulant, toeplitz

TOPOLOGIES = ("torus", "interval")
ENERGY_KINDS = ("entropy", "mixing_entropy", "free_energy")

# weights this far below zero are treated as roundoff, anything lower is rejected
NEGATIVE_TOL = 1e-12


class GridMismatchError(ValueError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Grid:
    """Uniform grid of ``n_cells`` cells on ``[0, length)``.

    ``topology`` is ``"torus"`` (periodic) or ``"interval"`` (no-flux walls).
    """

    n_cells: int
    length: float = 1.0
    topology: str = "torus"

    def __post_init__(self):
        if int(self.n_cells) != self.n_cells or self.n_cells < 1:
            raise ValueError("n_cells must be a positive integer")
        if not self.length > 0:
            raise ValueError("domain length must be positive")
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.topology!r}")
        object.__setattr__(self, "n_cells", int(self.n_cells))
        object.__setattr__(self, "length", float(self.length))

    @property
    def dx(self) -> float:
        return self.length / self.n_cells

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.n_cells) + 0.5) * self.dx

    @property
    def edges(self) -> np.ndarray:
        return np.arange(self.n_cells + 1) * self.dx

    @property
    def periodic(self) -> bool:
        return self.topology == "torus"

    def check_same(self, other: "Grid"):
        if self != other:
            raise GridMismatchError(f"grid mismatch: {self} vs {other}")

    def to_dict(self) -> dict:
        return {"n": self.n_cells, "L": self.length, "topology": self.topology}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(int(d["n"]), float(d["L"]), d["topology"])


@dataclass(frozen=True)
class GridMeasure:
    grid: Grid
    weights: np.ndarray

    def __post_init__(self):
        w = _frozen(self.weights)
        if w.shape != (self.grid.n_cells,):
            raise ValueError(f"expected {self.grid.n_cells} weights, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if w.size and w.min() < -NEGATIVE_TOL:
            raise ValueError("weights must be nonnegative")
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_density(cls, grid: Grid, density) -> "GridMeasure":
        return cls(grid, np.asarray(density, dtype=float) * grid.dx)

    @classmethod
    def uniform(cls, grid: Grid, mass: float = 1.0) -> "GridMeasure":
        return cls(grid, np.full(grid.n_cells, mass / grid.n_cells))

    @classmethod
    def from_function(cls, grid: Grid, f, normalize: bool = True) -> "GridMeasure":
        """Sample ``f`` at cell centers and (optionally) normalize to mass one."""
        dens = np.asarray(f(grid.centers), dtype=float)
        w = dens * grid.dx
        if normalize:
            w = w / w.sum()
        return cls(grid, w)

    @property
    def density(self) -> np.ndarray:
        return self.weights / self.grid.dx

    @property
    def mass(self) -> float:
        return math.fsum(self.weights)

    def is_probability(self, tol: float = 1e-12) -> bool:
        return abs(self.mass - 1.0) <= tol

    def normalized(self) -> "GridMeasure":
        return GridMeasure(self.grid, self.weights / self.weights.sum())

    def scaled(self, c: float) -> "GridMeasure":
        return GridMeasure(self.grid, self.weights * c)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["cell_index", "cell_center", "weight"])
        for i, (c, w) in enumerate(zip(self.grid.centers, self.weights)):
            wr.writerow([i, f"{c:.17g}", f"{w:.17g}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, grid: Grid) -> "GridMeasure":
        rows = list(csv.DictReader(io.StringIO(text)))
        w = np.zeros(grid.n_cells)
        for r in rows:
            w[int(r["cell_index"])] = float(r["weight"])
        return cls(grid, w)

    def to_json(self) -> str:
        return json.dumps({"grid": self.grid.to_dict(), "weights": [float(f"{w:.17g}") for w in self.weights]})

    @classmethod
    def from_json(cls, text: str) -> "GridMeasure":
        d = json.loads(text)
        return cls(Grid.from_dict(d["grid"]), d["weights"])


@dataclass(frozen=True)
class OccupationProfile:
    """Lattice-gas density profile with values in ``[0, 1]``."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values)
        if v.shape != (self.grid.n_cells,):
            raise ValueError("profile length does not match grid")
        if v.size and (v.min() < -NEGATIVE_TOL or v.max() > 1.0 + NEGATIVE_TOL):
            raise ValueError("occupation values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def density(self) -> np.ndarray:
        return self.values

    @property
    def mass(self) -> float:
        return math.fsum(self.values) * self.grid.dx


@dataclass(frozen=True)
class ParticleCloud:
    positions: np.ndarray
    domain: Grid

    def __post_init__(self):
        object.__setattr__(self, "positions", _frozen(self.positions).reshape(-1))

    def __len__(self):
        return self.positions.size


Slice = Union[GridMeasure, OccupationProfile]


@dataclass(frozen=True)
class MeasurePath:
    """Slices of a curve of measures on a uniform time grid."""

    times: np.ndarray
    slices: tuple

    def __post_init__(self):
        t = _frozen(self.times)
        sl = tuple(self.slices)
        if t.ndim != 1 or t.size != len(sl) or t.size == 0:
            raise ValueError("times and slices must be nonempty and of equal length")
        if t.size > 1:
            dt = np.diff(t)
            if dt.min() <= 0 or (dt.max() - dt.min()) > 1e-9 * max(1.0, abs(t[-1])):
                raise ValueError("time grid must be uniform and increasing")
        g = sl[0].grid
        kind = type(sl[0])
        for s in sl[1:]:
            g.check_same(s.grid)
            if type(s) is not kind:
                raise TypeError("all slices must have the same type")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "slices", sl)

    @property
    def grid(self) -> Grid:
        return self.slices[0].grid

    @property
    def dt(self) -> float:
        if self.times.size < 2:
            return 0.0
        return (self.times[-1] - self.times[0]) / (self.times.size - 1)

    def __len__(self):
        return len(self.slices)

    def densities(self) -> np.ndarray:
        """Array of shape ``(K+1, n_cells)`` with the density of each slice."""
        return np.array([s.density for s in self.slices])

    @classmethod
    def from_densities(cls, grid: Grid, times, densities, occupation: bool = False) -> "MeasurePath":
        if occupation:
            sl = [OccupationProfile(grid, f) for f in densities]
        else:
            sl = [GridMeasure.from_density(grid, f) for f in densities]
        return cls(np.asarray(times, dtype=float), tuple(sl))

    def reversed(self) -> "MeasurePath":
        return MeasurePath(self.times, tuple(reversed(self.slices)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["time", "cell_index", "weight"])
        for t, s in zip(self.times, self.slices):
            vals = s.weights if isinstance(s, GridMeasure) else s.values
            for i, w in enumerate(vals):
                wr.writerow([f"{t:.17g}", i, f"{w:.17g}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, grid: Grid) -> "MeasurePath":
        rows = list(csv.DictReader(io.StringIO(text)))
        times = sorted({float(r["time"]) for r in rows})
        index = {t: k for k, t in enumerate(times)}
        w = np.zeros((len(times), grid.n_cells))
        for r in rows:
            w[index[float(r["time"])], int(r["cell_index"])] = float(r["weight"])
        return cls(np.array(times), tuple(GridMeasure(grid, row) for row in w))

    def to_json(self) -> str:
        out = []
        for t, s in zip(self.times, self.slices):
            vals = s.weights if isinstance(s, GridMeasure) else s.values
            out.append({"time": float(t), "grid": s.grid.to_dict(), "weights": [float(v) for v in vals]})
        return json.dumps(out)

    @classmethod
    def from_json(cls, text: str) -> "MeasurePath":
        data = json.loads(text)
        sl = tuple(GridMeasure(Grid.from_dict(d["grid"]), d["weights"]) for d in data)
        return cls(np.array([d["time"] for d in data]), sl)


@dataclass(frozen=True)
class EnergySpec:
    """Driving functional: entropy, mixing entropy, or free energy.

    For ``free_energy`` the value is
    ``Ent(rho) + (1/kT) * [sum rho*Psi + 1/2 sum rho*(rho conv Phi)]``.
    ``interaction`` holds the kernel at offsets ``k*dx``, ``k = 0..n-1``
    (circular offsets on the torus, ``|i-j|`` on the interval).
    """

    kind: str = "entropy"
    potential: np.ndarray | None = None
    interaction: np.ndarray | None = None
    kT: float = 1.0

    def __post_init__(self):
        if self.kind not in ENERGY_KINDS:
            raise ValueError(f"unknown energy kind {self.kind!r}")
        if not self.kT > 0:
            raise ValueError("kT must be positive")
        for name in ("potential", "interaction"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, _frozen(v))
        phi = self.interaction
        if phi is not None and not np.allclose(phi[1:], phi[1:][::-1], rtol=0.0, atol=1e-12):
            # circular evenness phi[k] == phi[n-k]; harmless on the interval
            raise ValueError("interaction kernel must be even")

    def _check(self, grid: Grid):
        for v in (self.potential, self.interaction):
            if v is not None and v.shape != (grid.n_cells,):
                raise GridMismatchError("potential/interaction length does not match grid")

    def potential_on(self, grid: Grid) -> np.ndarray:
        self._check(grid)
        return np.zeros(grid.n_cells) if self.potential is None else self.potential

    def value(self, rho: Slice) -> float:
        if self.kind == "mixing_entropy":
            return mixing_entropy(rho)
        if self.kind == "entropy":
            return boltzmann_entropy(rho)
        return free_energy(rho, self)

    def derivative(self, rho: Slice) -> np.ndarray:
        return variational_derivative(self, rho)


def convolution_matrix(phi: np.ndarray, grid: Grid) -> np.ndarray:
    """Matrix ``C`` with ``(C @ w)_i = sum_j w_j Phi(x_i - x_j)``."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (grid.n_cells,):
        raise GridMismatchError("kernel length does not match grid")
    return circulant(phi) if grid.periodic else toeplitz(phi)


def convolve(rho: GridMeasure, phi: np.ndarray) -> np.ndarray:
    """Grid function ``rho * Phi`` (direct O(n^2) sum)."""
    return convolution_matrix(phi, rho.grid) @ rho.weights


def reflect_kernel(phi: np.ndarray) -> np.ndarray:
    """``Phi(-x)`` on circular offsets."""
    phi = np.asarray(phi, dtype=float)
    return np.concatenate([phi[:1], phi[1:][::-1]])


def _xlogx(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = x[pos] * np.log(x[pos])
    return out


def empirical_measure(cloud: ParticleCloud, grid: Grid) -> GridMeasure:
    x = cloud.positions
    if x.size == 0:
        raise ValueError("empty cloud")
    L = grid.length
    if np.any(x < 0) or np.any(x > L) or (grid.periodic and np.any(x >= L)):
        raise ValueError("out of domain")
    idx = np.minimum((x / grid.dx).astype(np.int64), grid.n_cells - 1)
    counts = np.bincount(idx, minlength=grid.n_cells)
    return GridMeasure(grid, counts / x.size)


def relative_entropy(rho: GridMeasure, mu: GridMeasure) -> float:
    rho.grid.check_same(mu.grid)
    p, q = rho.weights, mu.weights
    pos = p > 0
    if np.any(q[pos] <= 0):
        return math.inf
    return math.fsum(p[pos] * np.log(p[pos] / q[pos]))


def boltzmann_entropy(rho: GridMeasure) -> float:
    """``sum f log f dx`` for the cellwise density ``f``."""
    return math.fsum(_xlogx(rho.density)) * rho.grid.dx


def mixing_entropy(rho: OccupationProfile) -> float:
    v = rho.values
    return math.fsum(_xlogx(v) + _xlogx(1.0 - v)) * rho.grid.dx


def free_energy(rho: GridMeasure, spec: EnergySpec) -> float:
    if spec.kind != "free_energy":
        raise ValueError("free_energy needs an EnergySpec of kind 'free_energy'")
    spec._check(rho.grid)
    ent = boltzmann_entropy(rho)
    pot = 0.0
    if spec.potential is not None:
        pot += math.fsum(rho.weights * spec.potential)
    if spec.interaction is not None:
        pot += 0.5 * math.fsum(rho.weights * convolve(rho, spec.interaction))
    return ent + pot / spec.kT


def variational_derivative(spec: EnergySpec, rho: Slice) -> np.ndarray:
    """Grid function ``g`` with ``sum g s dx = dE(rho + eps s)/deps`` at 0.

    ``s`` is a density perturbation (mass change ``s_i dx`` in cell ``i``).
    """
    if spec.kind == "mixing_entropy":
        v = rho.values if isinstance(rho, OccupationProfile) else rho.density
        if np.any(v <= 0) or np.any(v >= 1):
            raise ValueError("mixing entropy derivative undefined at rho in {0, 1}")
        return np.log(v) - np.log1p(-v)
    f = rho.density
    if np.any(f <= 0):
        raise ValueError("entropy derivative undefined at vacuum")
    g = np.log(f) + 1.0
    if spec.kind == "free_energy":
        spec._check(rho.grid)
        extra = np.zeros_like(g)
        if spec.potential is not None:
            extra += spec.potential
        if spec.interaction is not None:
            extra += convolve(rho, spec.interaction)
        g = g + extra / spec.kT
    return g

