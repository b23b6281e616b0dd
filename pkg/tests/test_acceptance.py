"""Acceptance criteria, each run at its stated tolerance.

Every criterion records its parts through the ``acceptance`` fixture; the
terminal summary prints one PASS/FAIL line per criterion.  Parts that cannot
hold mathematically are strict xfails: they still run and still print FAIL.
"""
import math
import time

import numpy as np
import pytest

from ldpflow.experiments import defect_ladder, fdt_paths, heatbath_gaps, spin_flip_event
from ldpflow import heatbath as hb
from ldpflow.jko import decay_flow, decay_step, jko_flow
from ldpflow.measures import EnergySpec, Grid, GridMeasure, MeasurePath, ParticleCloud
from ldpflow.pde import PdeConfig, decay_solve, heat_solve
from ldpflow.rate import fdt_gap, gradflow_defect, rate_quadratic
from ldpflow.scalar import (
    DissipationPair,
    bd_lagrangian,
    conjugate,
    generalized_flow_solve,
    path_action,
    quadratic_energy,
    sf_lagrangian,
    spin_flip_energy,
)
from ldpflow.stochastic import ldp_slope_estimate, sanov_exact, spin_flip_simulate
from ldpflow.transport import (
    assignment_cost,
    bb_action,
    coupling_lp,
    geodesic_path,
    wasserstein_atoms,
    wasserstein_lp,
    wasserstein_quantile,
)


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def test_c01_transport_three_way(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    g = Grid(64, 1.0, "interval")
    worst = 0.0
    for _ in range(100):
        w = []
        for _ in range(2):
            idx = rng.choice(64, size=rng.integers(1, 33), replace=False)
            v = np.zeros(64)
            v[idx] = rng.random(idx.size) + 0.05
            w.append(GridMeasure(g, v / v.sum()))
        worst = max(worst, _rel(wasserstein_quantile(w[0], w[1], "atoms"), wasserstein_lp(w[0], w[1])))
        n = int(rng.integers(1, 33))
        x, y = rng.random(n), rng.random(n)
        un = np.full(n, 1 / n)
        a = assignment_cost(ParticleCloud(x, g), ParticleCloud(y, g))
        worst = max(worst, _rel(a, wasserstein_atoms(x, un, y, un)), _rel(a, coupling_lp(x, un, y, un)[0]))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 10
    acceptance(1, "three-way", ok, f"max rel {worst:.2e}, {elapsed:.1f} s")
    assert ok


def test_c02_jko_tracks_heat(acceptance):
    t0 = time.perf_counter()
    g = Grid(256, 1.0, "interval")
    rho0 = GridMeasure.from_function(g, lambda x: 1 + 0.5 * np.cos(2 * np.pi * x))
    ref = heat_solve(rho0, PdeConfig(g, 1e-5, 0.05)).slices[-1]
    gaps = [np.abs(jko_flow(rho0, h, round(0.05 / h), EnergySpec()).slices[-1].weights - ref.weights).sum()
            for h in (1e-3, 5e-4)]
    elapsed = time.perf_counter() - t0
    ratio = gaps[0] / gaps[1]
    ok = gaps[0] <= 5e-2 and ratio >= 1.7 and elapsed < 60
    acceptance(2, "jko-vs-heat", ok, f"gap {gaps[0]:.2e}, ratio {ratio:.2f}, {elapsed:.1f} s")
    assert ok


@pytest.mark.parametrize("kind", ["wasserstein", "ssep"])
def test_c03_defect_zero_on_solutions(acceptance, kind):
    fwd, rev = defect_ladder(kind, [(32, 10), (64, 20), (128, 40), (256, 80)], 0.05)
    ratios = fwd[:-1] / fwd[1:]
    sep = rev.min() / fwd[-1]
    ok = ratios.min() >= 2 and sep >= 10
    acceptance(3, kind, ok, f"min ratio {ratios.min():.1f}, reversed/finest {sep:.1e}")
    assert ok


def _synthetic(n, K, seed):
    rng = np.random.default_rng(seed)
    g = Grid(n, 1.0, "torus")
    amp = rng.uniform(-0.15, 0.15, (3, 2))
    ph = rng.uniform(0, 2 * np.pi, 3)
    om = rng.uniform(1, 3, 3)
    t = np.linspace(0, 1, K + 1)
    x = g.centers
    dens = [1 + sum((amp[j, 0] + amp[j, 1] * np.sin(om[j] * s)) * np.cos(2 * np.pi * (j + 1) * x + ph[j])
                    for j in range(3)) for s in t]
    return MeasurePath.from_densities(g, t, dens)


def test_c04_chain_rule(acceptance):
    worst, worst_ratio = 0.0, math.inf
    for seed in range(20):
        res = []
        for n, K in ((256, 128), (512, 256)):
            p = _synthetic(n, K, seed)
            d = gradflow_defect(p, EnergySpec())
            res.append(abs(rate_quadratic(p, EnergySpec()) - d) / (1 + d))
        worst = max(worst, res[0])
        worst_ratio = min(worst_ratio, res[0] / res[1])
    ok = worst <= 1e-4 and worst_ratio >= 2
    acceptance(4, "chain rule", ok, f"max residual {worst:.1e}, min refinement ratio {worst_ratio:.2f}")
    assert ok


def test_c05_sanov(acceptance):
    mu = np.array([0.5, 0.5])
    H = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    logp, sandwich = {}, True
    for n in (40, 80, 160):
        lp = sanov_exact(mu, n, log=True)[(3 * n // 4, n // 4)]
        logp[n] = lp
        gap = -lp / n - H
        sandwich &= 0 <= gap <= math.log(n + 1) / n
    slope = ldp_slope_estimate(logp, log=True).slope
    ok = sandwich and abs(slope - H) <= 0.1 * H and abs(H - 0.130812) < 1e-6
    acceptance(5, "sanov", ok, f"sandwich {sandwich}, slope {slope:.4f} vs H {H:.6f}")
    assert ok


def test_c06_spin_flip_ensemble(acceptance):
    reps = 10_000
    ens = spin_flip_simulate(50, 0.8, 0.5, 6, replicas=reps, sample_times=np.linspace(0, 0.5, 6))
    live = ens.times > 0
    z = np.abs(ens.mean[live] - 0.8 * np.exp(-2 * ens.times[live])) / np.sqrt(ens.var[live] / reps)
    ok = z.max() <= 3
    acceptance(6, "ensemble mean", ok, f"max |z| {z.max():.2f}")
    assert ok


def test_c06_spin_flip_atypical_bin(acceptance):
    # the bin around 0.9 at T = 0.25 lies off the relaxation path, so its rate is positive
    ns = (50, 100, 200)
    slope, action, per_n = spin_flip_event(ns, 0.8, 0.25, 0.9, 0.05)
    rel = abs(slope - action) / action
    improving = all(abs(a - action) > abs(b - action) for a, b in zip(per_n[:-1], per_n[1:]))
    ok = rel <= 0.15 and improving
    acceptance(6, "off-path bin", ok, f"slope {slope:.4f} vs action {action:.4f} (rel {rel:.3f}), improving {improving}")
    assert ok


@pytest.mark.xfail(strict=True, reason="the stated bin is centered on the typical endpoint, so the rate is 0 "
                                       "and a 15% relative match to 0 cannot hold")
def test_c06_spin_flip_stated_bin(acceptance):
    ns = (50, 100, 200)
    slope, action, per_n = spin_flip_event(ns, 0.8, 0.5, 0.8 * math.exp(-1), 0.05)
    ok = abs(slope - action) <= 0.15 * abs(action)
    acceptance(6, "stated bin", ok, f"slope {slope:.2e} vs action {action:.2e}; -log P/n {per_n[-1]:.2e} -> 0")
    assert ok


def test_c07_legendre_pairs(acceptance):
    v = np.linspace(-5, 5, 101)
    conj, young = 0.0, 0.0
    for a in (0.5, 1.0, 2.0):
        pair = DissipationPair("birth_death", a)
        for vi in v:
            conj = max(conj, abs(conjugate(lambda x: float(pair.psi(x)), vi) - float(pair.psi_star(vi))))
            young = max(young, abs(float(pair.young_gap(float(pair.dpsi_star(vi)), vi))))
    sf = DissipationPair("spin_flip")
    for m in (-0.9, 0.0, 0.9):
        for q in v:
            conj = max(conj, abs(conjugate(lambda x: float(sf.psi(x, m)), q) - float(sf.psi_star(q, m))))
            young = max(young, abs(float(sf.young_gap(float(sf.dpsi_star(q, m)), q, m))))
    ok = conj <= 1e-8 and young <= 1e-8
    acceptance(7, "legendre", ok, f"conjugate {conj:.1e}, young {young:.1e}")
    assert ok


def test_c08_zero_action_flows(acceptance):
    qe = quadratic_energy()
    t, u = generalized_flow_solve(qe, DissipationPair("birth_death", 1.0), 1.0, 1.0, 1e-3)
    a_bd = path_action(t, u, lambda x, y: bd_lagrangian(x, y, qe.dE, 1.0))
    rise_bd = np.diff(qe.E(u)).max()
    se = spin_flip_energy()
    t, m = generalized_flow_solve(se, DissipationPair("spin_flip"), 0.8, 1.0, 1e-3)
    a_sf = path_action(t, m, sf_lagrangian)
    rise_sf = np.diff(se.E(m)).max()
    ok = max(a_bd, a_sf) <= 1e-6 and max(rise_bd, rise_sf) <= 1e-12
    acceptance(8, "zero action", ok, f"actions {a_bd:.1e}, {a_sf:.1e}; max energy step {max(rise_bd, rise_sf):.1e}")
    assert ok


def test_c09_fdt_matched(acceptance):
    gaps = []
    for n in (256, 512):
        g, p = fdt_paths(n)
        gaps.append(fdt_gap(p, np.cos(2 * np.pi * g.centers), None, 1.0, 1.0))
    ok = max(gaps) <= 1e-6
    acceptance(9, "sigma2 = A", ok, f"gap {max(gaps):.1e}")
    assert ok


@pytest.mark.xfail(strict=True, reason="with scalar sigma2 = 2A the cross term is still an exact differential "
                                       "(of Ent + A Psi / sigma2), so it cannot be path dependent")
def test_c09_fdt_mismatched(acceptance):
    gaps = []
    for n in (256, 512):
        g, p = fdt_paths(n)
        gaps.append(fdt_gap(p, np.cos(2 * np.pi * g.centers), None, 1.0, 2.0))
    ok = min(gaps) >= 1e-3 and abs(gaps[0] - gaps[1]) <= 0.1 * max(gaps)
    acceptance(9, "sigma2 = 2A", ok, f"gaps {gaps[0]:.1e}, {gaps[1]:.1e}")
    assert ok


def test_c10_decay_scheme(acceptance):
    g = Grid(256, 1.0, "interval")
    psi = 8 * (g.centers - 0.5) ** 2
    rho0 = GridMeasure.from_function(g, lambda x: 1 + 0.5 * np.cos(2 * np.pi * x))
    rho, _ = decay_step(rho0, 1e-3, psi, 1.0)
    exponent = -math.log(rho.mass / rho0.mass) / 1e-3
    ref = decay_solve(rho0, psi, 1.0, PdeConfig(g, 1e-5, 0.1)).slices[-1]
    gaps = [np.abs(decay_flow(rho0, h, round(0.1 / h), psi, 1.0).slices[-1].weights - ref.weights).sum()
            for h in (4e-3, 2e-3, 1e-3)]
    ratios = [a / b for a, b in zip(gaps[:-1], gaps[1:])]
    ok = abs(exponent - 1.0) <= 0.01 and max(gaps) <= 5e-2 and min(ratios) >= 1.7
    acceptance(10, "decay", ok, f"exponent {exponent:.6f}, gaps {gaps[0]:.1e}..{gaps[-1]:.1e}, "
                                f"min ratio {min(ratios):.2f}")
    assert ok


def test_c11_heat_bath(acceptance):
    gaps = heatbath_gaps((4, 8, 16), (2, 4, 8), 0.25)
    mono = all(r[0] > r[1] > r[2] for r in gaps.values())
    sys_, bath = hb.two_state(), hb.BathModel(hb.two_state())
    tilt = hb.tilted_measure(sys_, hb.k_theta(bath, 0.25))
    const = hb.normalizing_constant(sys_, bath, 1e6, 0.25).value
    worst = max(abs(hb.reduced_rate(np.array([1 - r, r]), sys_, bath, 1e6, 0.25, const) -
                    hb.relative_entropy_vec(np.array([1 - r, r]), tilt)) for r in np.linspace(0.02, 0.98, 25))
    ok = mono and worst <= 1e-4
    acceptance(11, "heat bath", ok, f"ladder monotone {mono}, large-N gap {worst:.1e}")
    assert ok


def test_c12_benamou_brenier(acceptance):
    g = Grid(128, 1.0, "interval")
    a = GridMeasure.from_function(g, lambda x: 1 + 0.5 * np.cos(np.pi * x))
    b = GridMeasure.from_function(g, lambda x: np.exp(-4 * (x - 0.6) ** 2))
    w2 = wasserstein_quantile(a, b)
    geo = geodesic_path(a, b, 64)
    act = bb_action(geo)
    rel = abs(act - w2) / w2
    # competitors: the linear interpolation and positive perturbations of the geodesic
    times = geo.times
    lin = MeasurePath(times, tuple(GridMeasure(g, (1 - s) * a.weights + s * b.weights) for s in times))
    comps = [bb_action(lin)]
    rng = np.random.default_rng(5)
    for _ in range(5):
        bump = rng.standard_normal(4)
        shape = sum(c * np.sin((k + 1) * np.pi * g.centers) for k, c in enumerate(bump))
        shape -= shape.mean()
        sl = tuple(GridMeasure(g, s.weights * (1 + 0.2 * math.sin(np.pi * t) * shape / np.abs(shape).max()))
                   for s, t in zip(geo.slices, times))
        sl = tuple(GridMeasure(g, s.weights * (a.mass / s.mass)) for s in sl)
        comps.append(bb_action(MeasurePath(times, sl)))
    beaten = min(comps) < act - 1e-2 * w2
    ok = rel <= 1e-2 and not beaten
    acceptance(12, "benamou-brenier", ok, f"action/W2 - 1 = {rel:.1e}, best competitor {min(comps) / act:.3f} x")
    assert ok
