import math

import numpy as np
import pytest

from ldpflow.measures import Grid, GridMeasure, OccupationProfile, ParticleCloud, empirical_measure
from ldpflow.pde import PdeConfig, drift_interaction_solve, heat_solve
from ldpflow.stochastic import (
    birth_death_simulate,
    brownian_cloud,
    interacting_sde,
    ldp_slope_estimate,
    log_transition_density,
    replica_rng,
    reversibility_check,
    sanov_exact,
    spin_flip_generator,
    spin_flip_master,
    spin_flip_simulate,
    ssep_simulate,
)
from ldpflow.transport import assignment_cost


def test_replica_streams_differ_and_repeat():
    a = replica_rng(7, 0).random(4)
    assert np.array_equal(a, replica_rng(7, 0).random(4))
    assert not np.array_equal(a, replica_rng(7, 1).random(4))


def test_brownian_variance():
    g = Grid(64, 1.0, "interval")
    n = 100_000
    tr = brownian_cloud(n, 0.1, 0.1, ParticleCloud(np.full(n, 0.5), g), 7)
    d = tr.unwrapped[-1] - 0.5
    assert abs(d.var() - 0.2) <= 3 * 0.2 * math.sqrt(2 / n)


def test_brownian_zero_steps_and_determinism():
    g = Grid(8, 1.0, "torus")
    x0 = ParticleCloud(np.linspace(0, 0.9, 10), g)
    tr = brownian_cloud(10, 0.1, 0.01, x0, 3, record_every=5)
    assert np.array_equal(tr.clouds[0].positions, x0.positions)
    assert np.array_equal(tr.clouds[-1].positions, brownian_cloud(10, 0.1, 0.01, x0, 3).clouds[-1].positions)
    assert np.all((tr.clouds[-1].positions >= 0) & (tr.clouds[-1].positions < 1))


def test_ou_mean_relaxation():
    # Psi = 2 (x - 1/2)^2, A = 1: the mean relaxes like exp(-4 t) toward 1/2
    g = Grid(8, 4.0, "interval")
    n = 20_000
    tr = interacting_sde(n, lambda x: 4 * (x - 2.0), None, 1.0, 1.0, 0.25, 1e-3, ParticleCloud(np.full(n, 2.5), g), 1,
                         record_every=250)
    mean = tr.unwrapped[-1].mean()
    se = tr.unwrapped[-1].std() / math.sqrt(n)
    assert abs(mean - (2.0 + 0.5 * math.exp(-1.0))) <= 4 * se + 2e-3


@pytest.mark.slow
def test_interacting_cloud_tracks_pde():
    # one sample of 10^4 particles on 64 cells has L1 noise near 0.064, so replicas are averaged
    g = Grid(64, 1.0, "torus")
    n = 10_000
    x0 = ParticleCloud((np.arange(n) + 0.5) / n, g)
    ws = []
    for r in range(3):
        tr = interacting_sde(n, lambda y: -2 * np.pi * np.sin(2 * np.pi * y), lambda y: -2 * np.pi * np.sin(2 * np.pi * y),
                             1.0, 1.0, 0.1, 2e-3, x0, 100 + r, record_every=50)
        ws.append(empirical_measure(tr.clouds[-1], g).weights)
    phi = np.cos(2 * np.pi * np.arange(64) / 64)
    ref = drift_interaction_solve(GridMeasure.uniform(g), np.cos(2 * np.pi * g.centers), phi, PdeConfig(g, 1e-4, 0.1))
    assert np.abs(np.mean(ws, axis=0) - ref.slices[-1].weights).sum() <= 0.05


def test_ssep_full_lattice_frozen():
    res = ssep_simulate(16, np.ones(16, bool), 0.1, 1)
    assert res.n_jumps == 0
    assert np.all(res.snapshots[-1])


def test_ssep_conserves_particles():
    occ = np.zeros(32, bool)
    occ[::3] = True
    res = ssep_simulate(32, occ, 0.05, 2, snapshot_times=[0.0, 0.01, 0.05])
    assert all(s.sum() == occ.sum() for s in res.snapshots)


@pytest.mark.slow
def test_ssep_single_particle_msd():
    n, t = 64, 0.01
    d = np.array([ssep_simulate(n, np.eye(n, dtype=bool)[0], t, 12345 ^ r).displacement[0] for r in range(10_000)],
                 dtype=float)
    msd = (d**2).mean()
    assert abs(msd - n * n * t) <= 3 * (d**2).std() / 100


@pytest.mark.slow
def test_ssep_hydrodynamic_profile():
    # attempts at rate n^2/2 per direction give the limit d_t rho = (1/2) d_xx rho
    n = 512
    occ = np.zeros(n, bool)
    occ[: n // 2] = True
    prof = np.mean([ssep_simulate(n, occ, 0.1, 3 ^ r).density_profile(1, 64) for r in range(8)], axis=0)
    g = Grid(64, 1.0, "torus")
    ref = heat_solve(OccupationProfile(g, np.r_[np.ones(32), np.zeros(32)]), PdeConfig(g, 1e-4, 0.1, sigma2=0.5))
    assert np.abs(prof - ref.slices[-1].values).sum() * g.dx <= 0.08


def test_birth_death_symmetric():
    ens = birth_death_simulate(lambda u: 0 * u, 1.0, 100, 1.0, 0, 5, replicas=4000)
    se_mean = math.sqrt(ens.var[-1] / 4000)
    assert abs(ens.mean[-1]) <= 3 * se_mean
    assert abs(ens.var[-1] - 0.02) <= 3 * 0.02 * math.sqrt(2 / 4000)


def test_birth_death_drift():
    ens = birth_death_simulate(lambda u: math.log(2) + 0 * u, 1.0, 400, 0.5, 0, 5, replicas=200)
    assert ens.mean[-1] / 0.5 == pytest.approx(-1.5, abs=0.02)


def test_spin_flip_simulation():
    n = 50
    ens = spin_flip_simulate(n, 0.8, 0.5, 11, replicas=4000, sample_times=np.linspace(0, 0.5, 6))
    live = ens.times > 0
    z = np.abs(ens.mean[live] - 0.8 * np.exp(-2 * ens.times[live])) / np.sqrt(ens.var[live] / 4000)
    assert z.max() <= 3.5
    lattice = (ens.values + 1) * n / 2
    assert np.allclose(lattice, np.round(lattice)) and np.all(np.abs(ens.values) <= 1)
    with pytest.raises(ValueError):
        spin_flip_simulate(5, 0.5, 0.1, 0)


def test_spin_flip_generator_boundary_rates():
    Q = spin_flip_generator(10).toarray()
    assert np.allclose(Q.sum(axis=1), 0.0)
    # all spins up (j = n): down-rate n, no up-rate
    assert Q[10, 9] == 10 and Q[10, 10] == -10


def test_spin_flip_master_cases():
    P = spin_flip_master(2, 1.0, 0.5)
    assert P[-1] == pytest.approx(((1 + math.exp(-1)) / 2) ** 2, abs=1e-12)
    P0 = spin_flip_master(10, 0.4, 0.0)
    assert P0[7] == 1.0
    m = np.linspace(-1, 1, 101)
    for method in ("expm", "exact"):
        P = spin_flip_master(100, 0.8, 0.3, method=method)
        assert P.sum() == pytest.approx(1.0, abs=1e-12)
        assert float(m @ P) == pytest.approx(0.8 * math.exp(-0.6), abs=1e-10)
    assert np.abs(spin_flip_master(60, 0.8, 0.3) - spin_flip_master(60, 0.8, 0.3, method="exact")).max() < 1e-12
    with pytest.raises(ValueError):
        spin_flip_master(5000, 0.0, 0.1)


def test_sanov_examples():
    s = sanov_exact([0.5, 0.5], 4)
    assert s[(3, 1)] == pytest.approx(0.25, abs=1e-15)
    mu = np.array([0.2, 0.3, 0.5])
    s = sanov_exact(mu, 30)
    assert sum(s.values()) == pytest.approx(1.0, abs=1e-12)
    assert max(s, key=s.get) == (6, 9, 15)
    for c, p in s.items():
        rho = np.array(c) / 30
        pos = rho > 0
        H = float(np.sum(rho[pos] * np.log(rho[pos] / mu[pos])))
        gap = -math.log(p) / 30 - H
        assert -1e-12 <= gap <= 2 * math.log(31) / 30 + 1e-12
    with pytest.raises(ValueError):
        sanov_exact(np.full(7, 1 / 7), 10)


def test_slope_estimate():
    fit = ldp_slope_estimate({n: math.exp(-0.3 * n) for n in (10, 20, 40)})
    assert fit.slope == pytest.approx(0.3, abs=1e-12)
    assert np.abs(fit.residuals).max() < 1e-10
    with pytest.raises(ValueError):
        ldp_slope_estimate({10: 0.1, 20: 0.01})


def test_reversibility():
    cosine = lambda x: np.cos(2 * np.pi * x)  # noqa: E731
    ok, v = reversibility_check(cosine, 1.0, 1.0, 64)
    assert ok and v <= 1e-10
    ok, v = reversibility_check(cosine, 1.0, 2.0, 64)
    assert not ok and v > 1e-2
    ok, _ = reversibility_check(lambda x: 0 * x, 1.0, 2.0, 64)
    assert ok


def test_transition_exponent_approaches_transport_cost():
    rng = np.random.default_rng(0)
    x, y = rng.random(5), rng.random(5)
    g = Grid(8, 1.0, "interval")
    d2 = assignment_cost(ParticleCloud(x, g), ParticleCloud(y, g))
    errs = []
    for h in (1e-1, 1e-2, 1e-3):
        lt = log_transition_density(x, y, h)
        errs.append(abs(-(4 * h / 5) * (lt + 2.5 * math.log(4 * math.pi * h)) - d2))
    assert errs[0] > errs[1] > errs[2]
