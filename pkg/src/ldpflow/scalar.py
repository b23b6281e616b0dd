"""
Scalar generalized gradient flows ``u' = psi'(-E'(u))``.

Dissipation pairs come in three flavours:

* ``quadratic``:   psi(xi) = xi^2/2, psi*(v) = v^2/2;
* ``birth_death``: psi(xi) = alpha (e^xi + e^-xi), the jump walk with rates
  ``alpha exp(-+E'(k/n))``;
* ``spin_flip``:   psi_m(xi) = sqrt(1-m^2) cosh(2 xi), state dependent.

The Lagrangians ``L(u, v) = psi*(v) + psi(-E'(u)) + v E'(u)`` vanish exactly
on solutions of the flow.  Actions are discretized with the midpoint rule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize, minimize_scalar

PAIR_KINDS = ("quadratic", "birth_death", "spin_flip")


class ConjugateError(ValueError):
    pass


def conjugate(f: Callable[[float], float], v: float, search_interval=(-10.0, 10.0), expand: bool = True,
              tol: float = 1e-10) -> float:
    """Numeric Legendre transform ``sup_xi (v xi - f(xi))``.

    The concave objective is maximized by bounded Brent on
    ``search_interval``.  With ``expand`` the interval is doubled on the side
    where the maximizer sits at the edge; if it keeps running away the
    supremum is treated as infinite.
    """
    a, b = map(float, search_interval)
    if not a < b:
        raise ValueError("empty search interval")

    def neg(x):
        return f(x) - v * x

    for _ in range(60):
        res = minimize_scalar(neg, bounds=(a, b), method="bounded",
                              options={"xatol": tol * max(1.0, b - a) * 1e-2, "maxiter": 500})
        x = float(res.x)
        width = b - a
        at_lo = x - a < 1e-6 * width
        at_hi = b - x < 1e-6 * width
        if not expand or not (at_lo or at_hi):
            break
        if max(abs(a), abs(b)) > 1e8:
            raise ConjugateError("conjugate infinite")
        if at_lo:
            a -= width
        if at_hi:
            b += width
    else:
        raise ConjugateError("conjugate infinite")
    val = -float(res.fun)
    if not math.isfinite(val):
        raise ConjugateError("conjugate infinite")
    return val


@dataclass(frozen=True)
class DissipationPair:
    """Legendre pair ``(psi, psi*)``; the spin-flip pair depends on the state ``u = m``."""

    kind: str = "quadratic"
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in PAIR_KINDS:
            raise ValueError(f"unknown pair {self.kind!r}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    def _c(self, u):
        u = np.asarray(u, dtype=float)
        if np.any(np.abs(u) >= 1):
            raise ValueError("spin-flip pair needs |m| < 1")
        return np.sqrt(1.0 - u * u)

    def psi(self, xi, u=0.0):
        xi = np.asarray(xi, dtype=float)
        if self.kind == "quadratic":
            return 0.5 * xi * xi
        if self.kind == "birth_death":
            return 2.0 * self.alpha * np.cosh(xi)
        return self._c(u) * np.cosh(2.0 * xi)

    def dpsi(self, xi, u=0.0):
        xi = np.asarray(xi, dtype=float)
        if self.kind == "quadratic":
            return xi
        if self.kind == "birth_death":
            return 2.0 * self.alpha * np.sinh(xi)
        return 2.0 * self._c(u) * np.sinh(2.0 * xi)

    def psi_star(self, v, u=0.0):
        v = np.asarray(v, dtype=float)
        if self.kind == "quadratic":
            return 0.5 * v * v
        if self.kind == "birth_death":
            a = self.alpha
            r = np.sqrt(v * v + 4 * a * a)
            return v * np.log((v + r) / (2 * a)) - r
        c = self._c(u)
        r = np.sqrt(v * v + 4 * c * c)
        return 0.5 * v * np.log((v + r) / (2 * c)) - 0.5 * r

    def dpsi_star(self, v, u=0.0):
        v = np.asarray(v, dtype=float)
        if self.kind == "quadratic":
            return v
        if self.kind == "birth_death":
            return np.arcsinh(v / (2 * self.alpha))
        return 0.5 * np.arcsinh(v / (2 * self._c(u)))

    def young_gap(self, xi, v, u=0.0):
        """``psi(xi) + psi*(v) - xi v`` (nonnegative, zero on the graph of psi')."""
        return self.psi(xi, u) + self.psi_star(v, u) - np.asarray(xi) * np.asarray(v)


@dataclass(frozen=True)
class ScalarEnergy:
    E: Callable
    dE: Callable

    def check_derivative(self, points, step: float = 1e-5) -> float:
        """Largest gap between ``dE`` and a central difference of ``E``."""
        x = np.asarray(points, dtype=float)
        fd = (self.E(x + step) - self.E(x - step)) / (2 * step)
        return float(np.max(np.abs(fd - self.dE(x))))


def quadratic_energy(k: float = 1.0) -> ScalarEnergy:
    return ScalarEnergy(lambda u: 0.5 * k * np.asarray(u) ** 2, lambda u: k * np.asarray(u, dtype=float))


def spin_flip_energy() -> ScalarEnergy:
    """``E(m) = [(1+m) log(1+m) + (1-m) log(1-m)] / 4``."""

    def E(m):
        m = np.asarray(m, dtype=float)
        return 0.25 * (_xlogx(1 + m) + _xlogx(1 - m))

    def dE(m):
        m = np.asarray(m, dtype=float)
        return 0.25 * (np.log1p(m) - np.log1p(-m))

    return ScalarEnergy(E, dE)


def _xlogx(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0)), 0.0)


def bd_lagrangian(u, v, dE: Callable, alpha: float = 1.0):
    """Birth-death Lagrangian in closed form; zero iff ``v = 2 alpha sinh(-E'(u))``."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    v = np.asarray(v, dtype=float)
    e = np.asarray(dE(u), dtype=float)
    r = np.sqrt(v * v + 4 * alpha * alpha)
    return v * (np.log((v + r) / (2 * alpha)) + e) - r + alpha * np.exp(-e) + alpha * np.exp(e)


def sf_lagrangian(m, q):
    """Spin-flip magnetization Lagrangian; zero iff ``q = -2m``."""
    m = np.asarray(m, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.any(np.abs(m) >= 1):
        raise ValueError("spin-flip Lagrangian needs |m| < 1")
    r = np.sqrt(q * q + 4 * (1 - m * m))
    return 0.5 * q * np.log((q + r) / (2 * (1 - m))) - 0.5 * r + 1.0


def generalized_flow_solve(energy: ScalarEnergy, pair: DissipationPair, u0: float, t_end: float, dt: float):
    """RK4 for ``u' = psi_u'(-E'(u))``; returns ``(times, values)``."""
    if not (dt > 0 and t_end > 0):
        raise ValueError("dt and t_end must be positive")
    n = int(round(t_end / dt))
    if abs(n * dt - t_end) > 1e-9 * t_end:
        raise ValueError("t_end must be an integer multiple of dt")

    def rhs(u):
        return float(pair.dpsi(-energy.dE(u), u))

    u = np.empty(n + 1)
    u[0] = u0
    for k in range(n):
        x = u[k]
        k1 = rhs(x)
        if abs(k1) * dt > 0.1:
            raise ValueError(f"|u'| dt = {abs(k1) * dt:.3g} exceeds 0.1; reduce dt")
        k2 = rhs(x + 0.5 * dt * k1)
        k3 = rhs(x + 0.5 * dt * k2)
        k4 = rhs(x + dt * k3)
        u[k + 1] = x + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6
    return np.arange(n + 1) * dt, u


def path_action(times, values, L: Callable) -> float:
    """Midpoint rule ``sum L((u_k + u_{k+1})/2, (u_{k+1} - u_k)/dt) dt``."""
    t = np.asarray(times, dtype=float)
    u = np.asarray(values, dtype=float)
    if t.size != u.size or t.size < 2:
        raise ValueError("need at least two time points")
    dt = np.diff(t)
    if dt.min() <= 0 or dt.max() - dt.min() > 1e-9 * max(1.0, abs(t[-1])):
        raise ValueError("time grid must be uniform")
    mid = 0.5 * (u[1:] + u[:-1])
    vel = np.diff(u) / dt
    return math.fsum(np.asarray(L(mid, vel), dtype=float) * dt)


class ActionError(RuntimeError):
    def __init__(self, msg, best_value, best_path):
        super().__init__(msg)
        self.best_value = best_value
        self.best_path = best_path


def optimal_action(L: Callable, u_start: float, u_end: float, T: float, K: int = 64,
                   bounds=(None, None), maxiter: int = 500):
    """Minimal discrete action over paths with fixed endpoints.

    Returns ``(value, (times, path))``.  Interior nodes are optimized by
    L-BFGS-B from the straight line; ``bounds`` keeps them inside the
    Lagrangian's domain (e.g. ``(-1, 1)`` for the magnetization).
    """
    if K < 8:
        raise ValueError("need at least 8 intervals")
    if not T > 0:
        raise ValueError("T must be positive")
    dt = T / K
    times = np.linspace(0.0, T, K + 1)
    x0 = np.linspace(u_start, u_end, K + 1)[1:-1]
    h = 1e-7

    def unpack(x):
        return np.concatenate([[u_start], x, [u_end]])

    def fun(x):
        u = unpack(x)
        mid = 0.5 * (u[1:] + u[:-1])
        vel = np.diff(u) / dt
        val = np.asarray(L(mid, vel), dtype=float)
        # dL/du and dL/dv by central differences
        Lu = (np.asarray(L(mid + h, vel)) - np.asarray(L(mid - h, vel))) / (2 * h)
        Lv = (np.asarray(L(mid, vel + h)) - np.asarray(L(mid, vel - h))) / (2 * h)
        gk_left = 0.5 * Lu - Lv / dt   # derivative w.r.t. u_k of interval k
        gk_right = 0.5 * Lu + Lv / dt  # derivative w.r.t. u_{k+1} of interval k
        g = (gk_right[:-1] + gk_left[1:]) * dt
        return math.fsum(val * dt), g

    lo, hi = bounds
    eps = 1e-9
    bnds = None
    if lo is not None or hi is not None:
        bnds = [(None if lo is None else lo + eps, None if hi is None else hi - eps)] * x0.size
    res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bnds,
                   options={"maxiter": maxiter, "ftol": 1e-15, "gtol": 1e-10})
    path = unpack(res.x)
    value = float(res.fun)
    if not res.success and res.nit >= maxiter:
        raise ActionError(f"optimal_action did not converge (best value {value:.6g})", value, path)
    return value, (times, path)
