"""
A finite system exchanging energy with a finite heat bath.

``n`` system particles (law ``mu``, energies ``e``) and ``m = N n`` bath
particles (law ``nu``, energies ``e_B``) are conditioned on a fixed total
energy.  The bath enters the reduced rate only through the Cramer rate
``I_B(E) = sup_l [l E - log sum nu exp(l e_B)]`` of its mean energy, and
linearizing it in ``1/N`` produces the tilted (Boltzmann) measure with
``k theta = -1 / I_B'(Ebar)``.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import gammaln, logsumexp

ENERGY_BAND = 1e-9


@dataclass(frozen=True)
class FiniteSystem:
    states: tuple
    mu: np.ndarray
    e: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float)
        e = np.array(self.e, dtype=float)
        if mu.shape != (len(self.states),) or e.shape != mu.shape:
            raise ValueError("states, mu and e must have equal length")
        if np.any(mu < 0) or abs(math.fsum(mu) - 1) > 1e-12:
            raise ValueError("mu must be a probability vector")
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "e", e)

    @property
    def size(self) -> int:
        return len(self.states)

    def energy(self, rho) -> float:
        return float(np.dot(np.asarray(rho, dtype=float), self.e))


def two_state(mu=(0.5, 0.5), e=(0.0, 1.0)) -> FiniteSystem:
    return FiniteSystem((0, 1), mu, e)


def relative_entropy_vec(rho, mu) -> float:
    rho = np.asarray(rho, dtype=float)
    mu = np.asarray(mu, dtype=float)
    pos = rho > 0
    if np.any(mu[pos] <= 0):
        return math.inf
    return math.fsum(rho[pos] * np.log(rho[pos] / mu[pos]))


@dataclass(frozen=True)
class BathModel:
    """Heat bath with the Cramer rate of its single-site energy."""

    system: FiniteSystem

    @property
    def mean_energy(self) -> float:
        return float(np.dot(self.system.mu, self.system.e))

    @property
    def e_min(self) -> float:
        return float(self.system.e[self.system.mu > 0].min())

    @property
    def e_max(self) -> float:
        return float(self.system.e[self.system.mu > 0].max())

    def log_mgf(self, lam: float) -> float:
        pos = self.system.mu > 0
        return float(logsumexp(lam * self.system.e[pos], b=self.system.mu[pos]))

    def _tilted_mean(self, lam: float) -> float:
        pos = self.system.mu > 0
        e = self.system.e[pos]
        w = lam * e + np.log(self.system.mu[pos])
        w = np.exp(w - w.max())
        return float(np.dot(w, e) / w.sum())

    def _lambda(self, E: float) -> float:
        """Solve ``Lambda'(l) = E`` for ``E`` strictly inside the energy range."""
        f = lambda l: self._tilted_mean(l) - E  # noqa: E731
        a, b = -1.0, 1.0
        while f(a) > 0:
            a *= 2
            if a < -1e6:
                break
        while f(b) < 0:
            b *= 2
            if b > 1e6:
                break
        return brentq(f, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)

    def rate(self, E: float) -> float:
        """Cramer rate ``I_B(E)``; ``+inf`` outside ``[e_min, e_max]``."""
        lo, hi = self.e_min, self.e_max
        if E < lo - ENERGY_BAND or E > hi + ENERGY_BAND:
            return math.inf
        if hi - lo <= ENERGY_BAND:
            return 0.0
        mu, e = self.system.mu, self.system.e
        if E <= lo + 1e-14:
            return -math.log(mu[np.abs(e - lo) <= ENERGY_BAND].sum())
        if E >= hi - 1e-14:
            return -math.log(mu[np.abs(e - hi) <= ENERGY_BAND].sum())
        lam = self._lambda(E)
        return max(lam * E - self.log_mgf(lam), 0.0)

    def rate_derivative(self, E: float) -> float:
        """``I_B'(E)``, the tilt parameter solving ``Lambda'(l) = E``."""
        lo, hi = self.e_min, self.e_max
        if E <= lo:
            return -math.inf
        if E >= hi:
            return math.inf
        return self._lambda(E)


def tilted_measure(sys: FiniteSystem, kT: float) -> np.ndarray:
    """``mu exp(-e/kT)`` normalized."""
    if not kT > 0:
        raise ValueError("kT must be positive")
    with np.errstate(divide="ignore"):
        w = np.log(sys.mu) - sys.e / kT
    return np.exp(w - logsumexp(w))


def k_theta(bath: BathModel, Ebar: float) -> float:
    """``-1 / I_B'(Ebar)``; positive exactly when ``I_B'(Ebar) < 0``."""
    d = bath.rate_derivative(Ebar)
    if d == 0:
        return math.inf
    return -1.0 / d


def _raw_rate(rho, sys: FiniteSystem, bath: BathModel, N: float, Ebar: float) -> float:
    return relative_entropy_vec(rho, sys.mu) + N * bath.rate(Ebar - sys.energy(rho) / N)


def _gibbs_family(sys: FiniteSystem, lam: float) -> np.ndarray:
    with np.errstate(divide="ignore"):
        w = np.log(sys.mu) + lam * sys.e
    return np.exp(w - logsumexp(w))


def reduced_minimizer(sys: FiniteSystem, bath: BathModel, N: float, Ebar: float) -> np.ndarray:
    """Minimizer ``rho ~ mu exp(l e)`` with ``l = I_B'(Ebar - E(rho)/N)``.

    ``l -> l - I_B'(Ebar - E(rho_l)/N)`` is increasing, so the fixed point is
    a one-dimensional root.
    """
    big = 1e300

    def g(lam):
        d = bath.rate_derivative(Ebar - sys.energy(_gibbs_family(sys, lam)) / N)
        return lam - min(max(d, -big), big)

    a, b = -1.0, 1.0
    while g(a) > 0 and a > -1e6:
        a *= 2
    while g(b) < 0 and b < 1e6:
        b *= 2
    lam = brentq(g, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    return _gibbs_family(sys, lam)


@dataclass(frozen=True)
class _Normalizer:
    value: float
    minimizer: np.ndarray


def normalizing_constant(sys: FiniteSystem, bath: BathModel, N: float, Ebar: float) -> _Normalizer:
    rho = reduced_minimizer(sys, bath, N, Ebar)
    return _Normalizer(-_raw_rate(rho, sys, bath, N, Ebar), rho)


def reduced_rate(rho, sys: FiniteSystem, bath: BathModel, N: float, Ebar: float, const: float | None = None) -> float:
    """``H(rho|mu) + N I_B(Ebar - E(rho)/N) + const`` with ``inf = 0``."""
    if const is None:
        const = normalizing_constant(sys, bath, N, Ebar).value
    raw = _raw_rate(rho, sys, bath, N, Ebar)
    return raw + const if math.isfinite(raw) else math.inf


def coupled_rate(rho, zeta, sys: FiniteSystem, bath: BathModel, N: float, Ebar: float,
                 const: float | None = None) -> float:
    """Joint rate: finite only on the energy shell ``E(rho) + N E_B(zeta) = N Ebar``."""
    rho = np.asarray(rho, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    if rho.shape != sys.mu.shape or zeta.shape != bath.system.mu.shape:
        raise ValueError("shape mismatch")
    EB = bath.system.energy(zeta)
    if abs(sys.energy(rho) + N * EB - N * Ebar) > ENERGY_BAND:
        return math.inf
    if const is None:
        const = normalizing_constant(sys, bath, N, Ebar).value
    val = relative_entropy_vec(rho, sys.mu) + N * bath.rate(EB)
    return val + const if math.isfinite(val) else math.inf


# ---------------------------------------------------------------------------
# exact conditioning by composition counting


def _compositions(n, k):
    for cut in itertools.combinations(range(n + k - 1), k - 1):
        prev = -1
        c = []
        for x in cut:
            c.append(x - prev - 1)
            prev = x
        c.append(n + k - 2 - prev)
        yield tuple(c)


def _log_multinomial(counts, p) -> float:
    c = np.asarray(counts, dtype=float)
    pos = c > 0
    if np.any(p[pos] <= 0):
        return -math.inf
    return float(gammaln(c.sum() + 1) - gammaln(c + 1).sum() + (c[pos] * np.log(p[pos])).sum())


def _energy_levels(sys: FiniteSystem, n: int):
    """Merge compositions into total-energy levels: sorted energies, log-weights."""
    en, lw = [], []
    for c in _compositions(n, sys.size):
        w = _log_multinomial(c, sys.mu)
        if np.isfinite(w):
            en.append(float(np.dot(c, sys.e)))
            lw.append(w)
    en = np.array(en)
    lw = np.array(lw)
    order = np.argsort(en, kind="stable")
    en, lw = en[order], lw[order]
    levels, weights = [], []
    for E, w in zip(en, lw):
        if levels and E - levels[-1] <= ENERGY_BAND:
            weights[-1] = np.logaddexp(weights[-1], w)
        else:
            levels.append(E)
            weights.append(w)
    return np.array(levels), np.array(weights)


def microcanonical_enumerate(sys: FiniteSystem, bath: BathModel, n: int, m: int, total_energy: float,
                             log: bool = False) -> dict:
    """Conditional law of the system composition given the total energy.

    Keys are count tuples over the system states.  Energies match within
    ``ENERGY_BAND``.
    """
    levels, lw_bath = _energy_levels(bath.system, m)
    out = {}
    for c in _compositions(n, sys.size):
        w = _log_multinomial(c, sys.mu)
        if not np.isfinite(w):
            continue
        need = total_energy - float(np.dot(c, sys.e))
        i = np.searchsorted(levels, need - ENERGY_BAND)
        j = np.searchsorted(levels, need + ENERGY_BAND, side="right")
        if j > i:
            out[c] = w + float(logsumexp(lw_bath[i:j]))
    if not out:
        raise ValueError("infeasible energy")
    Z = float(logsumexp(list(out.values())))
    if log:
        return {c: v - Z for c, v in out.items()}
    return {c: math.exp(v - Z) for c, v in out.items()}


def microcanonical_bruteforce(sys: FiniteSystem, bath: BathModel, n: int, m: int, total_energy: float) -> dict:
    """Raw enumeration of all microstates (tiny instances only)."""
    if sys.size**n * bath.system.size**m > 10**6:
        raise ValueError("instance too large for brute force")
    acc = {}
    for xs in itertools.product(range(sys.size), repeat=n):
        px = float(np.prod(sys.mu[list(xs)]))
        ex = float(sys.e[list(xs)].sum())
        for ys in itertools.product(range(bath.system.size), repeat=m):
            if abs(ex + bath.system.e[list(ys)].sum() - total_energy) > ENERGY_BAND:
                continue
            c = tuple(np.bincount(xs, minlength=sys.size).tolist())
            acc[c] = acc.get(c, 0.0) + px * float(np.prod(bath.system.mu[list(ys)]))
    if not acc:
        raise ValueError("infeasible energy")
    Z = math.fsum(acc.values())
    return {c: v / Z for c, v in acc.items()}


def ladder_report(sys: FiniteSystem, bath: BathModel, n: int, N: int, Ebar: float) -> dict:
    """JSON-ready table of ``-(1/n) log P`` against the reduced rate."""
    m = n * N
    total = m * Ebar
    logp = microcanonical_enumerate(sys, bath, n, m, total, log=True)
    const = normalizing_constant(sys, bath, N, Ebar).value
    table = []
    for c, lp in sorted(logp.items()):
        rho = np.array(c, dtype=float) / n
        r = reduced_rate(rho, sys, bath, N, Ebar, const)
        table.append({"composition": list(c), "prob": math.exp(lp), "rate_gap": -lp / n - r})
    return {"n": n, "m": m, "N": N, "Ebar": Ebar, "kT_effective": k_theta(bath, Ebar), "table": table}


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
