"""
Particle and jump-process simulators, exact small-system laws, slope fits.

Randomness: every replica ``r`` draws from its own
``numpy.random.Generator(PCG64(seed ^ r))``, so ensemble results do not
depend on the order in which replicas run.  Jump processes use exact
Gillespie clocks.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numba as nb
import numpy as np
from scipy.sparse import diags
from scipy.sparse.linalg import expm_multiply
from scipy.special import gammaln, logsumexp

from .measures import Grid, ParticleCloud

SANOV_MAX_ALPHABET = 6
SANOV_MAX_N = 200
SANOV_MAX_TYPES = 5_000_000
MASTER_MAX_N = 2000


def replica_rng(seed: int, r: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) ^ int(r)))


def _n_steps(t_end, dt):
    if not (dt > 0 and t_end >= 0):
        raise ValueError("need dt > 0 and t_end >= 0")
    if t_end == 0:
        return 0
    if dt > t_end * (1 + 1e-12):
        raise ValueError("dt must not exceed t_end")
    k = int(round(t_end / dt))
    if abs(k * dt - t_end) > 1e-9 * t_end:
        raise ValueError("t_end must be an integer multiple of dt")
    return k


# ---------------------------------------------------------------------------
# diffusions


@dataclass(frozen=True)
class CloudTrajectory:
    """Recorded clouds plus unwrapped coordinates ``(len(times), n)``."""

    times: np.ndarray
    clouds: tuple
    unwrapped: np.ndarray

    def __len__(self):
        return len(self.clouds)

    def __getitem__(self, k):
        return self.clouds[k]


def _fold(x, grid: Grid):
    L = grid.length
    if grid.periodic:
        return np.mod(x, L)
    # reflect into [0, L]
    y = np.mod(x, 2 * L)
    return np.where(y > L, 2 * L - y, y)


def _dphi_table(dphi, grid: Grid, size: int = 8193):
    half = grid.length / 2 if grid.periodic else grid.length
    r = np.linspace(-half, half, size)
    v = np.asarray(dphi(r), dtype=float) * np.ones(size)
    # enforce exact oddness so the pair loop can use action = reaction
    return r[0], r[1] - r[0], 0.5 * (v - v[::-1])


@nb.njit(cache=True)
def _pair_force(x, lo, step, table, period):
    # Phi is even, so Phi' is odd: each pair is visited once
    n = x.size
    out = np.zeros(n)
    m = table.size
    for i in range(n):
        xi = x[i]
        acc = 0.0
        for j in range(i + 1, n):
            d = xi - x[j]
            if period > 0:
                d -= period * np.floor(d / period + 0.5)
            s = (d - lo) / step
            k = int(s)
            if k < 0:
                k = 0
            elif k > m - 2:
                k = m - 2
            w = s - k
            f = (1.0 - w) * table[k] + w * table[k + 1]
            acc += f
            out[j] -= f
        out[i] += acc
    return out


def interacting_sde(n: int, dpsi, dphi, A: float, sigma2: float, t_end: float, dt: float,
                    x0: ParticleCloud, seed: int, record_every: int = 1) -> CloudTrajectory:
    """Euler-Maruyama for ``dX_i = -A Psi'(X_i) dt - (A/n) sum_j Phi'(X_i - X_j) dt + sqrt(2 sigma2) dW_i``.

    ``dpsi`` and ``dphi`` are vectorized callables (or ``None``).  ``Phi'`` is
    tabulated once on 8193 points and interpolated inside an O(n^2) compiled
    loop; torus differences use the minimal image.  Torus positions are
    wrapped, interval positions reflected; ``unwrapped`` keeps the raw sums.
    """
    if len(x0) != n:
        raise ValueError("x0 must hold n particles")
    if not (A > 0 and sigma2 > 0):
        raise ValueError("A and sigma2 must be positive")
    grid = x0.domain
    steps = _n_steps(t_end, dt)
    rng = replica_rng(seed)
    x = np.array(x0.positions, dtype=float)
    raw = x.copy()
    period = grid.length if grid.periodic else -1.0
    table = _dphi_table(dphi, grid) if dphi is not None else None
    noise = math.sqrt(2.0 * sigma2 * dt)
    times, clouds, unwrapped = [0.0], [x0], [raw.copy()]
    for k in range(1, steps + 1):
        drift = np.zeros(n)
        if dpsi is not None:
            drift -= A * np.asarray(dpsi(x), dtype=float)
        if table is not None:
            drift -= (A / n) * _pair_force(x, table[0], table[1], table[2], period)
        inc = drift * dt + noise * rng.standard_normal(n)
        raw = raw + inc
        x = _fold(x + inc, grid)
        if k % record_every == 0:
            times.append(k * dt)
            clouds.append(ParticleCloud(x.copy(), grid))
            unwrapped.append(raw.copy())
    return CloudTrajectory(np.array(times), tuple(clouds), np.array(unwrapped))


def brownian_cloud(n: int, t_end: float, dt: float, x0: ParticleCloud, seed: int,
                   record_every: int = 1) -> CloudTrajectory:
    """Independent particles with generator Laplacian: increments of variance ``2 dt``."""
    return interacting_sde(n, None, None, 1.0, 1.0, t_end, dt, x0, seed, record_every)


# ---------------------------------------------------------------------------
# exclusion process


@nb.njit(cache=True)
def _ssep_kernel(occ, pos, disp, rate, t_end, snap_times, rng):
    n_sites = occ.size
    n_part = pos.size
    n_snap = snap_times.size
    snaps = np.zeros((n_snap, n_sites), dtype=np.bool_)
    t = 0.0
    s = 0
    jumps = 0
    total = rate * 2.0 * n_part
    while True:
        if n_part > 0:
            t += rng.standard_exponential() / total
        else:
            t = np.inf
        while s < n_snap and snap_times[s] <= t:
            snaps[s] = occ
            s += 1
        if t > t_end or s >= n_snap:
            break
        p = rng.integers(0, n_part)
        step = 1 if rng.random() < 0.5 else -1
        src = pos[p]
        dst = (src + step) % n_sites
        if not occ[dst]:
            occ[src] = False
            occ[dst] = True
            pos[p] = dst
            disp[p] += step
            jumps += 1
    return snaps, jumps


@dataclass(frozen=True)
class SsepResult:
    times: np.ndarray
    snapshots: np.ndarray
    displacement: np.ndarray
    n_jumps: int

    def density_profile(self, k: int, n_cells: int) -> np.ndarray:
        """Occupation averaged over ``n_cells`` equal blocks of sites."""
        occ = self.snapshots[k].astype(float)
        if occ.size % n_cells:
            raise ValueError("n_cells must divide the number of sites")
        return occ.reshape(n_cells, -1).mean(axis=1)


def ssep_simulate(n_sites: int, occupation, t_end: float, seed: int, snapshot_times=None) -> SsepResult:
    """Exclusion process on the ring ``Z/n``: each particle tries each neighbour at rate ``n^2/2``.

    Attempts onto occupied sites are suppressed.  ``displacement`` is the
    unwrapped site displacement of every particle at the end.
    """
    occ = np.asarray(occupation, dtype=bool).copy()
    if occ.size != n_sites:
        raise ValueError("occupation length must equal n_sites")
    snap = np.array([0.0, t_end] if snapshot_times is None else sorted(snapshot_times), dtype=float)
    if snap.size and (snap[0] < 0 or snap[-1] > t_end):
        raise ValueError("snapshot times must lie in [0, t_end]")
    pos = np.flatnonzero(occ).astype(np.int64)
    disp = np.zeros(pos.size, dtype=np.int64)
    rng = replica_rng(seed)
    snaps, jumps = _ssep_kernel(occ, pos, disp, n_sites**2 / 2.0, float(t_end), snap, rng)
    return SsepResult(snap, snaps, disp, int(jumps))


# ---------------------------------------------------------------------------
# scalar jump processes


@nb.njit(cache=True)
def _walk_kernel(k0, up, down, offset, t_end, sample_times, rng):
    """Gillespie walk with tabulated rates; returns samples and an escape flag."""
    out = np.empty(sample_times.size, dtype=np.int64)
    k = k0
    t = 0.0
    s = 0
    size = up.size
    while True:
        i = k - offset
        if i < 0 or i >= size:
            return out, True
        a = up[i]
        b = down[i]
        tot = a + b
        if tot > 0:
            t += rng.standard_exponential() / tot
        else:
            t = np.inf
        while s < sample_times.size and sample_times[s] < t:
            out[s] = k
            s += 1
        if s >= sample_times.size or t > t_end:
            while s < sample_times.size:
                out[s] = k
                s += 1
            return out, False
        if rng.random() * tot < a:
            k += 1
        else:
            k -= 1


@dataclass(frozen=True)
class ScalarEnsemble:
    """Replica paths ``values[r, k]`` sampled at ``times``."""

    times: np.ndarray
    values: np.ndarray
    seed: int
    n: int

    @property
    def mean(self):
        return self.values.mean(axis=0)

    @property
    def var(self):
        return self.values.var(axis=0, ddof=1) if self.values.shape[0] > 1 else np.zeros(self.times.size)

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "replicas": int(self.values.shape[0]), "mean": self.mean.tolist(),
                           "var": self.var.tolist(), "seed": int(self.seed), "times": self.times.tolist()},
                          indent=2)

    def to_csv(self) -> str:
        lines = ["replica,time,value"]
        for r in range(self.values.shape[0]):
            for t, v in zip(self.times, self.values[r]):
                lines.append(f"{r},{t:.17g},{v:.17g}")
        return "\n".join(lines) + "\n"


def _sample_grid(t_end, sample_times):
    ts = np.array([0.0, t_end] if sample_times is None else sample_times, dtype=float)
    if np.any(np.diff(ts) < 0) or ts[0] < 0 or ts[-1] > t_end:
        raise ValueError("sample times must be sorted inside [0, t_end]")
    return ts


def birth_death_simulate(dE, alpha: float, n: int, t_end: float, k0: int, seed: int, replicas: int = 1,
                         sample_times=None) -> ScalarEnsemble:
    """Rescaled walk ``U_n(t) = k(nt)/n`` with rates ``alpha exp(-+E'(k/n))``."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    ts = _sample_grid(t_end, sample_times)
    vals = np.empty((replicas, ts.size))
    width = max(64, int(8 * math.sqrt(n * max(t_end, 1e-12) * 2 * alpha)) + 16)
    for r in range(replicas):
        while True:
            ks = np.arange(k0 - width, k0 + width + 1)
            e = np.asarray(dE(ks / n), dtype=float) * np.ones(ks.size)
            up = n * alpha * np.exp(-e)
            down = n * alpha * np.exp(e)
            out, escaped = _walk_kernel(k0, up, down, k0 - width, float(t_end), ts, replica_rng(seed, r))
            if not escaped:
                break
            width *= 2
        vals[r] = out / n
    return ScalarEnsemble(ts, vals, seed, n)


def _check_magnetization(n, m0):
    j = n * (1 + m0) / 2
    if abs(j - round(j)) > 1e-9 or not -1 - 1e-12 <= m0 <= 1 + 1e-12:
        raise ValueError("invalid magnetization for this n")
    return int(round(j))


def spin_flip_simulate(n: int, m0: float, t_end: float, seed: int, replicas: int = 1,
                       sample_times=None) -> ScalarEnsemble:
    """Magnetization of ``n`` independent rate-1 spins: ``m -> m -+ 2/n`` at rates ``n(1 +- m)/2``."""
    j0 = _check_magnetization(n, m0)
    ts = _sample_grid(t_end, sample_times)
    j = np.arange(n + 1)
    # up count j: j -> j-1 at rate j, j -> j+1 at rate n-j
    up = (n - j).astype(float)
    down = j.astype(float)
    vals = np.empty((replicas, ts.size))
    for r in range(replicas):
        out, escaped = _walk_kernel(j0, up, down, 0, float(t_end), ts, replica_rng(seed, r))
        if escaped:
            raise RuntimeError("spin-flip walk left the lattice")
        vals[r] = 2.0 * out / n - 1.0
    return ScalarEnsemble(ts, vals, seed, n)


def spin_flip_generator(n: int):
    """Sparse generator ``Q`` on up counts ``j = 0..n`` (rows sum to zero)."""
    j = np.arange(n + 1, dtype=float)
    upper = (n - j)[:-1]
    lower = j[1:]
    return diags([lower, -(n - j) - j, upper], [-1, 0, 1], format="csr")


def spin_flip_master(n: int, m0: float, t_end: float, method: str = "expm", log: bool = False) -> np.ndarray:
    """Law of the magnetization at ``t_end``, indexed by ``m = -1 + 2j/n``.

    ``method="expm"`` applies ``exp(t Q^T)`` to the initial point mass.
    ``method="exact"`` uses independence of the spins (sum of two binomials,
    evaluated in log space) and is accurate in the far tails, where the
    matrix exponential is limited by absolute round-off.
    """
    if n > MASTER_MAX_N:
        raise ValueError(f"n too large for the master equation (max {MASTER_MAX_N})")
    j0 = _check_magnetization(n, m0)
    if method == "expm":
        p0 = np.zeros(n + 1)
        p0[j0] = 1.0
        P = p0 if t_end == 0 else expm_multiply(spin_flip_generator(n).T.tocsc() * t_end, p0)
        if P.min() < -1e-12 or abs(math.fsum(P) - 1.0) > 1e-12:
            raise RuntimeError("master equation solve lost accuracy")
        P = np.abs(P)
        return np.log(P) if log else P
    if method != "exact":
        raise ValueError("method must be 'expm' or 'exact'")
    e = math.exp(-2.0 * t_end)
    a = 0.5 * (1 + e)  # an up spin is up at t
    b = 0.5 * (1 - e)  # a down spin is up at t
    la = _log_binom_pmf(j0, a)
    lb = _log_binom_pmf(n - j0, b)
    logP = np.full(n + 1, -np.inf)
    for i, v in enumerate(la):
        if np.isfinite(v):
            seg = logP[i:i + lb.size]
            logP[i:i + lb.size] = np.logaddexp(seg, v + lb)
    return logP if log else np.exp(logP)


def _log_binom_pmf(N, p):
    k = np.arange(N + 1)
    with np.errstate(divide="ignore"):
        lp = np.log(p) if p > 0 else -np.inf
        lq = np.log1p(-p) if p < 1 else -np.inf
        out = gammaln(N + 1) - gammaln(k + 1) - gammaln(N - k + 1)
        out = out + np.where(k > 0, k * lp, 0.0) + np.where(N - k > 0, (N - k) * lq, 0.0)
    return out


# ---------------------------------------------------------------------------
# exact types and slope fits


def _compositions(n, k):
    for cut in itertools.combinations(range(n + k - 1), k - 1):
        prev = -1
        c = []
        for x in cut:
            c.append(x - prev - 1)
            prev = x
        c.append(n + k - 2 - prev)
        yield tuple(c)


def sanov_logprob(mu, counts) -> float:
    """``log P(type = counts / n)`` for ``n`` i.i.d. draws from ``mu``."""
    mu = np.asarray(mu, dtype=float)
    c = np.asarray(counts, dtype=float)
    n = c.sum()
    pos = c > 0
    if np.any(mu[pos] <= 0):
        return -math.inf
    return float(gammaln(n + 1) - gammaln(c + 1).sum() + (c[pos] * np.log(mu[pos])).sum())


def sanov_exact(mu, n: int, log: bool = False) -> dict:
    """Exact multinomial law of the empirical type; keys are count tuples."""
    mu = np.asarray(mu, dtype=float)
    k = mu.size
    if k > SANOV_MAX_ALPHABET or n > SANOV_MAX_N:
        raise ValueError(f"sanov_exact limited to alphabet <= {SANOV_MAX_ALPHABET} and n <= {SANOV_MAX_N}")
    if np.any(mu < 0) or abs(mu.sum() - 1) > 1e-12:
        raise ValueError("mu must be a probability vector")
    if math.comb(n + k - 1, k - 1) > SANOV_MAX_TYPES:
        raise ValueError("too many types to enumerate")
    out = {c: sanov_logprob(mu, c) for c in _compositions(n, k)}
    if log:
        return out
    return {c: math.exp(v) for c, v in out.items()}


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    residuals: np.ndarray
    ns: np.ndarray


def ldp_slope_estimate(probs: dict, log: bool = False) -> SlopeFit:
    """Least-squares fit ``-log P(n) = slope * n + intercept``.

    ``probs`` maps ``n`` to a probability (or a log-probability when ``log``).
    """
    if len(probs) < 3:
        raise ValueError("need at least 3 values of n")
    ns = np.array(sorted(probs), dtype=float)
    vals = np.array([probs[k] for k in sorted(probs)], dtype=float)
    if log:
        y = -vals
    else:
        if np.any(vals <= 0):
            raise ValueError("probabilities must be positive")
        y = -np.log(vals)
    if not np.all(np.isfinite(y)):
        raise ValueError("probabilities must be positive")
    X = np.column_stack([ns, np.ones_like(ns)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return SlopeFit(float(coef[0]), float(coef[1]), y - X @ coef, ns)


def reversibility_check(psi, A: float, sigma2: float, n_states: int, candidate_kT: float = 1.0,
                        length: float = 1.0, tol: float = 1e-10):
    """Detailed balance of the lattice chain for ``-A Psi' d_x + sigma2 d_xx`` on a ring.

    Jump rates ``(sigma2/dx^2) exp(-+ (A/sigma2)(Psi_{i+-1} - Psi_i)/2)`` are
    reversible for ``exp(-A Psi / sigma2)``; the check uses the candidate
    ``exp(-Psi / candidate_kT)``.  Returns ``(ok, max relative violation)``.
    """
    dx = length / n_states
    x = (np.arange(n_states) + 0.5) * dx
    P = np.asarray(psi(x) if callable(psi) else psi, dtype=float) * np.ones(n_states)
    Pn = np.roll(P, -1)
    c = sigma2 / dx**2
    q_fwd = c * np.exp(-0.5 * (A / sigma2) * (Pn - P))  # i -> i+1
    q_bwd = c * np.exp(-0.5 * (A / sigma2) * (P - Pn))  # i+1 -> i
    logpi = -P / candidate_kT
    logpi -= logsumexp(logpi)
    pi = np.exp(logpi)
    flow_f = pi * q_fwd
    flow_b = np.roll(pi, -1) * q_bwd
    viol = float(np.max(np.abs(flow_f - flow_b) / np.maximum(flow_f, flow_b)))
    return viol <= tol, viol


def log_transition_density(x, y, h: float, period: float | None = None) -> float:
    """Log density of the unlabeled configuration ``y`` after time ``h`` from ``x``.

    Brownian particles with generator Laplacian: kernel
    ``(4 pi h)^{-1/2} exp(-|x - y|^2 / 4h)``; the unlabeled density is
    ``(1/n!) perm(K)``, summed over all permutations (``n <= 9``).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    if y.size != n or n > 9:
        raise ValueError("need equal counts and n <= 9")
    d = x[:, None] - y[None, :]
    if period is not None:
        d = d - period * np.round(d / period)
    logK = -d * d / (4 * h) - 0.5 * math.log(4 * math.pi * h)
    terms = [logK[np.arange(n), list(p)].sum() for p in itertools.permutations(range(n))]
    return float(logsumexp(terms) - gammaln(n + 1))
