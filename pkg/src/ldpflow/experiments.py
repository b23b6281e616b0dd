"""
Named numerical experiments run by the command line tool.

Each experiment is a function ``(params, seed) -> Outcome``.  Parameters
are validated against the registered defaults before anything runs, and
every outcome carries the thresholds it was judged against.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from . import heatbath as hb
from .jko import decay_flow, decay_step, jko_flow
from .measures import EnergySpec, Grid, GridMeasure, MeasurePath, OccupationProfile, ParticleCloud
from .pde import PdeConfig, decay_solve, heat_solve
from .rate import fdt_gap, gradflow_defect
from .scalar import (
    DissipationPair,
    bd_lagrangian,
    conjugate,
    generalized_flow_solve,
    optimal_action,
    path_action,
    quadratic_energy,
    sf_lagrangian,
    spin_flip_energy,
)
from .stochastic import (
    ldp_slope_estimate,
    log_transition_density,
    replica_rng,
    sanov_exact,
    spin_flip_master,
    spin_flip_simulate,
)
from .transport import assignment_cost, coupling_lp, wasserstein_atoms, wasserstein_lp, wasserstein_quantile


class ConfigError(ValueError):
    pass


@dataclass
class Outcome:
    metrics: dict
    passed: bool
    thresholds: dict
    tables: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Experiment:
    name: str
    summary: str
    tags: tuple
    defaults: dict
    thresholds: dict
    outputs: tuple
    run: Callable


def _csv(header, rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for r in rows:
        buf.write(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in r) + "\n")
    return buf.getvalue()


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


# ---------------------------------------------------------------------------


def _w2_crosscheck(p, seed):
    rng = replica_rng(seed)
    g = Grid(int(p["n_cells"]), 1.0, "interval")
    rows = []
    worst = 0.0
    for i in range(int(p["pairs"])):
        k = int(p["max_atoms"])
        w = []
        for _ in range(2):
            idx = rng.choice(g.n_cells, size=rng.integers(1, k + 1), replace=False)
            v = np.zeros(g.n_cells)
            v[idx] = rng.random(idx.size) + 0.05
            w.append(GridMeasure(g, v / v.sum()))
        q = wasserstein_quantile(w[0], w[1], "atoms")
        lp = wasserstein_lp(w[0], w[1])
        # equal-count empiricals: sorting, quantile atoms and the LP
        npts = int(rng.integers(1, k + 1))
        x, y = rng.random(npts), rng.random(npts)
        un = np.full(npts, 1.0 / npts)
        asg = assignment_cost(ParticleCloud(x, g), ParticleCloud(y, g))
        qa = wasserstein_atoms(x, un, y, un)
        la, _ = coupling_lp(x, un, y, un)
        d = max(_rel(q, lp), _rel(asg, qa), _rel(asg, la), _rel(qa, la))
        worst = max(worst, d)
        rows.append((i, q, lp, asg, qa, la, d))
    tol = p["tolerance"]
    table = _csv(["pair", "quantile", "lp", "assignment", "quantile_atoms", "lp_atoms", "max_rel"], rows)
    return Outcome({"max_disagreement": worst}, worst <= tol, {"max_disagreement": tol}, {"pairs": table})


def _jko_vs_heat(p, seed):
    g = Grid(int(p["n_cells"]), 1.0, "interval")
    amp = p["amplitude"]
    rho0 = GridMeasure.from_function(g, lambda x: 1 + amp * np.cos(2 * np.pi * x))
    T, h = p["t_end"], p["h"]
    ref = heat_solve(rho0, PdeConfig(g, p["reference_dt"], T)).slices[-1]
    gaps, finals, rises = [], [], []
    for hh in (h, h / 2):
        path, E = jko_flow(rho0, hh, int(round(T / hh)), EnergySpec(), return_energies=True)
        finals.append(path.slices[-1])
        gaps.append(float(np.abs(path.slices[-1].weights - ref.weights).sum()))
        rises.append(float(np.diff(E).max()))
    ratio = gaps[0] / gaps[1]
    m = {"l1_gap": gaps[0], "l1_gap_half_h": gaps[1], "ratio": ratio, "max_energy_increase": max(rises)}
    thr = {"l1_gap": p["max_gap"], "ratio": p["min_ratio"]}
    ok = gaps[0] <= thr["l1_gap"] and ratio >= thr["ratio"] and max(rises) <= 1e-12
    rows = zip(g.centers, finals[0].density, finals[1].density, ref.density)
    return Outcome(m, ok, thr, {"profiles": _csv(["x", "jko_h", "jko_half_h", "heat"], rows)})


def defect_ladder(kind: str, levels, T: float):
    """Defect on forward and time-reversed heat paths over a refinement ladder."""
    fwd, rev = [], []
    for n, K in levels:
        g = Grid(int(n), 1.0, "torus")
        cfg = PdeConfig(g, T / K, T)
        if kind == "ssep":
            rho0 = OccupationProfile(g, 0.5 + 0.3 * np.cos(2 * np.pi * g.centers))
            spec = EnergySpec("mixing_entropy")
        else:
            rho0 = GridMeasure.from_function(g, lambda x: 1 + 0.5 * np.cos(2 * np.pi * x))
            spec = EnergySpec()
        path = heat_solve(rho0, cfg)
        fwd.append(gradflow_defect(path, spec, "ssep" if kind == "ssep" else "wasserstein"))
        rev.append(gradflow_defect(path.reversed(), spec, "ssep" if kind == "ssep" else "wasserstein"))
    return np.array(fwd), np.array(rev)


def _rate_zero(p, seed):
    levels = [(p["n_cells"] * 2**k, p["steps"] * 2**k) for k in range(4)]
    m, rows, ok = {}, [], True
    for kind in ("wasserstein", "ssep"):
        fwd, rev = defect_ladder(kind, levels, p["t_end"])
        ratios = fwd[:-1] / fwd[1:]
        sep = rev.min() / fwd[-1]
        m[f"{kind}_min_ratio"] = float(ratios.min())
        m[f"{kind}_reversed_over_finest"] = float(sep)
        ok &= ratios.min() >= p["min_ratio"] and sep >= p["min_separation"]
        rows += [(kind, n, K, f, r) for (n, K), f, r in zip(levels, fwd, rev)]
    thr = {"min_ratio": p["min_ratio"], "reversed_over_finest": p["min_separation"]}
    return Outcome(m, bool(ok), thr, {"refinement": _csv(["mobility", "n_cells", "steps", "forward", "reversed"], rows)})


def _sanov(p, seed):
    mu = np.array(p["mu"], dtype=float)
    rho = np.array(p["rho"], dtype=float)
    H = float(np.sum(rho * np.log(rho / mu)))
    logp, rows, ok = {}, [], True
    for n in p["ns"]:
        c = tuple(int(round(r * n)) for r in rho)
        lp = sanov_exact(mu, n, log=True)[c]
        logp[n] = lp
        gap = -lp / n - H
        bound = (len(mu) - 1) * math.log(n + 1) / n
        ok &= 0 <= gap <= bound
        rows.append((n, -lp / n, gap, bound))
    fit = ldp_slope_estimate(logp, log=True)
    rel = abs(fit.slope - H) / H
    ok &= rel <= p["slope_tolerance"]
    m = {"relative_entropy": H, "slope": fit.slope, "slope_relative_error": rel}
    return Outcome(m, bool(ok), {"slope_relative_error": p["slope_tolerance"], "sandwich": "(k-1) log(n+1)/n"},
                   {"ladder": _csv(["n", "minus_log_p_over_n", "gap", "bound"], rows)})


def spin_flip_bin_logprob(n, m0, T, lo, hi):
    lp = spin_flip_master(n, m0, T, method="exact", log=True)
    m = np.linspace(-1.0, 1.0, n + 1)
    sel = (m >= lo - 1e-12) & (m <= hi + 1e-12)
    return float(logsumexp(lp[sel]))


def spin_flip_event(ns, m0, T, center, width, K=64):
    """Slope of ``-log P(terminal bin)`` and the minimal action to the bin."""
    lo, hi = center - width / 2, center + width / 2
    logp = {n: spin_flip_bin_logprob(n, m0, T, lo, hi) for n in ns}
    fit = ldp_slope_estimate(logp, log=True)
    typical = m0 * math.exp(-2 * T)
    end = min(max(typical, lo), hi)
    action, _ = optimal_action(sf_lagrangian, m0, end, T, K, bounds=(-1, 1))
    per_n = [-logp[n] / n for n in ns]
    return fit.slope, action, per_n


def _spinflip(p, seed):
    m0 = p["m0"]
    ns = list(p["ns"])
    tol = p["tolerance"]
    s_typ, a_typ, typ = spin_flip_event(ns, m0, p["T"], m0 * math.exp(-2 * p["T"]), p["bin_width"])
    s_at, a_at, at = spin_flip_event(ns, m0, p["atypical_T"], p["atypical_center"], p["bin_width"])
    literal = abs(s_typ - a_typ) <= tol * abs(a_typ)
    atyp_ok = abs(s_at - a_at) <= tol * a_at
    improving = all(abs(x - a_at) > abs(y - a_at) for x, y in zip(at[:-1], at[1:]))
    ens = spin_flip_simulate(p["ensemble_n"], m0, p["T"], seed, replicas=p["replicas"],
                             sample_times=np.linspace(0, p["T"], 6))
    # the t = 0 sample is deterministic and carries no standard error
    live = ens.times > 0
    se = np.sqrt(ens.var[live] / p["replicas"])
    z_max = float(np.max(np.abs(ens.mean[live] - m0 * np.exp(-2 * ens.times[live])) / se))
    m = {"typical_slope": s_typ, "typical_action": a_typ, "typical_relative_check": bool(literal),
         "atypical_slope": s_at, "atypical_action": a_at, "atypical_relative_error": abs(s_at - a_at) / a_at,
         "atypical_improving": bool(improving), "ensemble_max_z": z_max}
    ok = literal and atyp_ok and improving and z_max <= 3
    rows = [(n, x, y) for n, x, y in zip(ns, typ, at)]
    thr = {"relative": tol, "ensemble_z": 3.0}
    return Outcome(m, bool(ok), thr, {"ladder": _csv(["n", "typical_minus_log_p_over_n", "atypical_minus_log_p_over_n"], rows)})


def _birthdeath(p, seed):
    grid_v = np.linspace(-5, 5, int(p["samples"]))
    worst = 0.0
    young = 0.0
    for a in p["alphas"]:
        pair = DissipationPair("birth_death", a)
        for v in grid_v:
            worst = max(worst, abs(conjugate(lambda x: float(pair.psi(x)), v) - float(pair.psi_star(v))))
            xi = float(pair.dpsi_star(v))
            young = max(young, abs(float(pair.young_gap(xi, v))))
    sf = DissipationPair("spin_flip")
    for mm in p["magnetizations"]:
        for q in grid_v:
            worst = max(worst, abs(conjugate(lambda x: float(sf.psi(x, mm)), q) - float(sf.psi_star(q, mm))))
            young = max(young, abs(float(sf.young_gap(float(sf.dpsi_star(q, mm)), q, mm))))
    dt, T = p["dt"], p["t_end"]
    qe = quadratic_energy()
    alpha = p["alpha"]
    t, u = generalized_flow_solve(qe, DissipationPair("birth_death", alpha), p["u0"], T, dt)
    act_bd = path_action(t, u, lambda a, b: bd_lagrangian(a, b, qe.dE, alpha))
    rise_bd = float(np.diff(qe.E(u)).max())
    se = spin_flip_energy()
    t2, mg = generalized_flow_solve(se, sf, p["m0"], T, dt)
    act_sf = path_action(t2, mg, sf_lagrangian)
    rise_sf = float(np.diff(se.E(mg)).max())
    m = {"conjugate_max_error": worst, "young_max_gap": young, "action_birth_death": act_bd,
         "action_spin_flip": act_sf, "max_energy_increase": max(rise_bd, rise_sf)}
    thr = {"conjugate_max_error": 1e-8, "young_max_gap": 1e-8, "action": 1e-6, "energy_slack": 1e-12}
    ok = worst <= 1e-8 and young <= 1e-8 and max(act_bd, act_sf) <= 1e-6 and max(rise_bd, rise_sf) <= 1e-12
    rows = zip(t, u, mg)
    return Outcome(m, bool(ok), thr, {"flows": _csv(["t", "u_birth_death", "m_spin_flip"], rows)})


def fdt_paths(n: int, steps: int = 64):
    """Two distinct paths with common endpoints on the unit torus."""
    g = Grid(n, 1.0, "torus")
    x = g.centers
    f0 = 1 + 0.5 * np.cos(2 * np.pi * x)
    f1 = 1 + 0.4 * np.sin(4 * np.pi * x)
    bump = 0.8 * np.sin(2 * np.pi * x)
    t = np.linspace(0.0, 1.0, steps + 1)
    curved = MeasurePath.from_densities(g, t, [(1 - s) * f0 + s * f1 + s * (1 - s) * bump for s in t])
    return g, curved


def _fdt(p, seed):
    A = p["A"]
    rows, m = [], {}
    for n in (p["n_cells"], 2 * p["n_cells"]):
        g, path = fdt_paths(n)
        psi = np.cos(2 * np.pi * g.centers)
        eq = fdt_gap(path, psi, None, A, A)
        ne = fdt_gap(path, psi, None, A, 2 * A)
        var = fdt_gap(path, psi, None, A, A * (1 + 0.5 * np.sin(2 * np.pi * g.centers)))
        rows.append((n, eq, ne, var))
    m = {"gap_equal": rows[0][1], "gap_double": rows[0][2], "gap_double_refined": rows[1][2],
         "gap_varying": rows[0][3], "gap_varying_refined": rows[1][3]}
    thr = {"gap_equal_max": p["equal_tolerance"], "gap_double_min": p["unequal_minimum"]}
    ok = max(rows[0][1], rows[1][1]) <= thr["gap_equal_max"] and min(rows[0][2], rows[1][2]) >= thr["gap_double_min"]
    return Outcome(m, bool(ok), thr, {"gaps": _csv(["n_cells", "sigma2_eq_A", "sigma2_eq_2A", "sigma2_varying"], rows)})


def _decay(p, seed):
    g = Grid(int(p["n_cells"]), 1.0, "interval")
    psi = p["potential_scale"] * (g.centers - 0.5) ** 2
    lam = p["lam"]
    rho0 = GridMeasure.from_function(g, lambda x: 1 + 0.5 * np.cos(2 * np.pi * x))
    h = p["h"]
    rho, _ = decay_step(rho0, h, psi, lam)
    exponent = -math.log(rho.mass / rho0.mass) / h
    T = p["t_end"]
    ref = decay_solve(rho0, psi, lam, PdeConfig(g, p["reference_dt"], T)).slices[-1]
    hs = [h * 2**k for k in range(int(p["levels"]) - 1, -1, -1)]
    gaps = []
    for hh in hs:
        path = decay_flow(rho0, hh, int(round(T / hh)), psi, lam)
        gaps.append(float(np.abs(path.slices[-1].weights - ref.weights).sum()))
    ratios = [a / b for a, b in zip(gaps[:-1], gaps[1:])]
    m = {"exponent_relative_error": abs(exponent - lam) / lam, "l1_gap_finest": gaps[-1], "l1_gap_coarsest": gaps[0],
         "min_ratio": min(ratios)}
    thr = {"exponent_relative_error": 0.01, "l1_gap": p["max_gap"], "ratio": p["min_ratio"]}
    ok = m["exponent_relative_error"] <= 0.01 and max(gaps) <= p["max_gap"] and min(ratios) >= p["min_ratio"]
    return Outcome(m, bool(ok), thr, {"ladder": _csv(["h", "l1_gap"], zip(hs, gaps))})


def heatbath_gaps(ns, Ns, Ebar):
    sys_ = hb.two_state()
    bath = hb.BathModel(hb.two_state())
    out = {}
    for N in Ns:
        row = []
        for n in ns:
            rep = hb.ladder_report(sys_, bath, n, N, Ebar)
            row.append(next(abs(r["rate_gap"]) for r in rep["table"] if r["composition"] == [n // 2, n - n // 2]))
        out[N] = row
    return out


def _heatbath(p, seed):
    Ebar = p["Ebar"]
    gaps = heatbath_gaps(p["ns"], p["Ns"], Ebar)
    mono = all(all(a > b for a, b in zip(r[:-1], r[1:])) for r in gaps.values())
    sys_ = hb.two_state()
    bath = hb.BathModel(hb.two_state())
    kt = hb.k_theta(bath, Ebar)
    tilt = hb.tilted_measure(sys_, kt)
    Nl = p["N_large"]
    const = hb.normalizing_constant(sys_, bath, Nl, Ebar).value
    rng = replica_rng(seed)
    worst = 0.0
    for r in rng.uniform(0.01, 0.99, int(p["samples"])):
        rho = np.array([1 - r, r])
        worst = max(worst, abs(hb.reduced_rate(rho, sys_, bath, Nl, Ebar, const) - hb.relative_entropy_vec(rho, tilt)))
    m = {"kT_effective": kt, "ladder_monotone": bool(mono), "large_N_max_gap": worst}
    thr = {"large_N_max_gap": 1e-4}
    rows = [(N, n, gp) for N, r in gaps.items() for n, gp in zip(p["ns"], r)]
    tables = {"ladder": _csv(["N", "n", "rate_gap"], rows)}
    for N in p["Ns"]:
        rep = hb.ladder_report(sys_, bath, p["ns"][-1], N, Ebar)
        tables[f"report_N{N}"] = hb.report_json(rep)
    return Outcome(m, bool(mono and worst <= 1e-4), thr, tables)


def _discrete_mobility(p, seed):
    rng = replica_rng(seed)
    n = int(p["particles"])
    g = Grid(8, 1.0, "interval")
    x, y = rng.random(n), rng.random(n)
    d2 = assignment_cost(ParticleCloud(x, g), ParticleCloud(y, g))
    rows = []
    for h in p["hs"]:
        lt = log_transition_density(x, y, h)
        measured = -(4 * h / n) * (lt + 0.5 * n * math.log(4 * math.pi * h))
        rows.append((h, measured, d2, abs(measured - d2)))
    errs = [r[3] for r in rows]
    ok = all(np.isfinite(errs)) and all(a > b for a, b in zip(errs[:-1], errs[1:]))
    m = {"squared_distance": d2, "exponent_smallest_h": rows[-1][1], "error_smallest_h": errs[-1]}
    return Outcome(m, bool(ok), {"error_decreasing_in_h": True},
                   {"exponents": _csv(["h", "measured", "predicted", "abs_error"], rows)})


REGISTRY = {
    e.name: e
    for e in (
        Experiment("w2-crosscheck", "Quantile, linear-programming and assignment routes to W2 on random pairs.",
                   ("def:W-distance",), {"pairs": 100, "n_cells": 64, "max_atoms": 32, "tolerance": 1e-9},
                   {"max_disagreement": 1e-9}, ("summary.json", "pairs.csv"), _w2_crosscheck),
        Experiment("jko-vs-heat", "Entropy minimizing-movement scheme against a Crank-Nicolson heat solve.",
                   ("approx:JKO", "eq:diffusion"),
                   {"n_cells": 256, "h": 1e-3, "t_end": 0.05, "amplitude": 0.5, "reference_dt": 1e-5,
                    "max_gap": 5e-2, "min_ratio": 1.7},
                   {"l1_gap": 5e-2, "ratio": 1.7}, ("summary.json", "profiles.csv"), _jko_vs_heat),
        Experiment("rate-zero-on-solution", "Gradient-flow defect on heat paths under refinement, forward and reversed.",
                   ("equiv:connection", "equiv:connection-M"),
                   {"n_cells": 32, "steps": 10, "t_end": 0.05, "min_ratio": 2.0, "min_separation": 10.0},
                   {"min_ratio": 2.0, "reversed_over_finest": 10.0}, ("summary.json", "refinement.csv"), _rate_zero),
        Experiment("sanov-ladder", "Exact type probabilities against the relative entropy.", ("ldp:entropy",),
                   {"mu": [0.5, 0.5], "rho": [0.75, 0.25], "ns": [40, 80, 160], "slope_tolerance": 0.1},
                   {"slope_relative_error": 0.1}, ("summary.json", "ladder.csv"), _sanov),
        Experiment("spinflip-ldp", "Terminal-bin probabilities of the spin-flip chain against the minimal action.",
                   ("def:Jpsi",),
                   {"ns": [50, 100, 200], "m0": 0.8, "T": 0.5, "bin_width": 0.05, "atypical_T": 0.25,
                    "atypical_center": 0.9, "tolerance": 0.15, "ensemble_n": 100, "replicas": 10000},
                   {"relative": 0.15, "ensemble_z": 3.0}, ("summary.json", "ladder.csv"), _spinflip),
        Experiment("birthdeath-flow", "Legendre pairs and zero action along generalized gradient flows.",
                   ("def:genGF", "equiv:connection-psi"),
                   {"alphas": [0.5, 1.0, 2.0], "magnetizations": [-0.9, 0.0, 0.9], "samples": 41, "alpha": 1.0,
                    "u0": 1.0, "m0": 0.8, "t_end": 1.0, "dt": 1e-3},
                   {"conjugate_max_error": 1e-8, "action": 1e-6}, ("summary.json", "flows.csv"), _birthdeath),
        Experiment("fdt-equivalence", "Path dependence of the noise/mobility cross term.", ("eq:FK-FDT",),
                   {"n_cells": 256, "A": 1.0, "equal_tolerance": 1e-6, "unequal_minimum": 1e-3},
                   {"gap_equal_max": 1e-6, "gap_double_min": 1e-3}, ("summary.json", "gaps.csv"), _fdt),
        Experiment("decay-scheme", "Minimizing-movement scheme for diffusion with decay.",
                   ("eq: diffusion drift decay", "min:intro-rhok-DD"),
                   {"n_cells": 256, "h": 1e-3, "levels": 3, "lam": 1.0, "potential_scale": 8.0, "t_end": 0.1,
                    "reference_dt": 1e-5, "max_gap": 5e-2, "min_ratio": 1.7},
                   {"exponent_relative_error": 0.01, "l1_gap": 5e-2, "ratio": 1.7}, ("summary.json", "ladder.csv"),
                   _decay),
        Experiment("heatbath-ladder", "Microcanonical system plus bath against the reduced rate.",
                   ("def:app:free-energy",),
                   {"ns": [4, 8, 16], "Ns": [2, 4, 8], "Ebar": 0.25, "N_large": 1e6, "samples": 20},
                   {"large_N_max_gap": 1e-4}, ("summary.json", "ladder.csv", "report_N*.json"), _heatbath),
        Experiment("discrete-time-mobility", "Short-time transition exponent of Brownian particles against W2.",
                   ("equiv:two_metrics",), {"particles": 6, "hs": [0.1, 0.01, 0.001]},
                   {"error_decreasing_in_h": True}, ("summary.json", "exponents.csv"), _discrete_mobility),
    )
}


def resolve_parameters(name: str, overrides: dict) -> dict:
    if name not in REGISTRY:
        raise ConfigError(f"unknown experiment {name!r}")
    exp = REGISTRY[name]
    unknown = set(overrides) - set(exp.defaults)
    if unknown:
        raise ConfigError(f"unknown parameters for {name}: {sorted(unknown)}")
    params = dict(exp.defaults)
    for k, v in overrides.items():
        d = exp.defaults[k]
        if isinstance(d, list) != isinstance(v, list) or (not isinstance(d, list) and isinstance(v, str)):
            raise ConfigError(f"parameter {k!r} has the wrong type")
        params[k] = v
    return params


def describe(name: str | None = None) -> str:
    names = sorted(REGISTRY) if name is None else [name]
    blocks = []
    for nm in names:
        if nm not in REGISTRY:
            raise ConfigError(f"unknown experiment {nm!r}")
        e = REGISTRY[nm]
        lines = [nm, f"  {e.summary}", f"  cites: {', '.join(e.tags)}", "  parameters:"]
        lines += [f"    {k} = {v!r}" for k, v in e.defaults.items()]
        lines.append("  thresholds:")
        lines += [f"    {k} = {v!r}" for k, v in e.thresholds.items()]
        lines.append(f"  outputs: {', '.join(e.outputs)}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"
