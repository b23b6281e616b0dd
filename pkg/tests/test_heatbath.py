import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldpflow.heatbath import (
    BathModel,
    FiniteSystem,
    coupled_rate,
    k_theta,
    ladder_report,
    microcanonical_bruteforce,
    microcanonical_enumerate,
    normalizing_constant,
    reduced_minimizer,
    reduced_rate,
    relative_entropy_vec,
    report_json,
    tilted_measure,
    two_state,
)

SYS = two_state()
BATH = BathModel(two_state())
EBAR = 0.25


def test_tilted_measure_cases():
    assert np.allclose(tilted_measure(SYS, 1.0), [1 / (1 + math.exp(-1)), math.exp(-1) / (1 + math.exp(-1))])
    flat = FiniteSystem((0, 1, 2), [0.2, 0.3, 0.5], [1.0, 1.0, 1.0])
    assert np.allclose(tilted_measure(flat, 0.7), flat.mu)
    assert np.allclose(tilted_measure(SYS, 1e6), SYS.mu, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1e3))
def test_tilted_is_probability(kT):
    p = tilted_measure(FiniteSystem((0, 1, 2), [0.2, 0.3, 0.5], [0.0, 1.5, -2.0]), kT)
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12


def test_bath_cramer_rate_closed_form():
    for E in (0.1, 0.25, 0.6):
        assert BATH.rate(E) == pytest.approx(E * math.log(2 * E) + (1 - E) * math.log(2 * (1 - E)), abs=1e-12)
    assert BATH.rate(0.5) == pytest.approx(0.0, abs=1e-15)
    assert BATH.rate(1.2) == math.inf
    assert BATH.rate(0.0) == pytest.approx(math.log(2))


def test_k_theta_sign_follows_derivative():
    assert k_theta(BATH, EBAR) == pytest.approx(1 / math.log(3), rel=1e-12)
    assert k_theta(BATH, 0.75) < 0
    assert BATH.rate_derivative(0.75) > 0


def test_coupled_rate_constraint_and_minimum():
    N = 4.0
    c = normalizing_constant(SYS, BATH, N, EBAR)
    rho = c.minimizer
    zeta = np.array([1 - (EBAR - SYS.energy(rho) / N), EBAR - SYS.energy(rho) / N])
    assert coupled_rate(rho, zeta, SYS, BATH, N, EBAR) == pytest.approx(0.0, abs=1e-12)
    assert coupled_rate(rho, np.array([0.5, 0.5]), SYS, BATH, N, EBAR) == math.inf
    mu = SYS.mu
    zmu = np.array([1 - (EBAR - SYS.energy(mu) / N), EBAR - SYS.energy(mu) / N])
    val = coupled_rate(mu, zmu, SYS, BATH, N, EBAR)
    assert val == pytest.approx(N * BATH.rate(EBAR - SYS.energy(mu) / N) + c.value, abs=1e-12)
    assert val >= 0


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.sampled_from([2.0, 8.0, 100.0]))
def test_reduced_rate_nonnegative(r, N):
    assert reduced_rate(np.array([1 - r, r]), SYS, BATH, N, EBAR) >= -1e-12


def test_reduced_rate_large_N_limit():
    N = 1e6
    const = normalizing_constant(SYS, BATH, N, EBAR).value
    tilt = tilted_measure(SYS, k_theta(BATH, EBAR))
    for r in np.random.default_rng(0).uniform(0.01, 0.99, 20):
        rho = np.array([1 - r, r])
        assert abs(reduced_rate(rho, SYS, BATH, N, EBAR, const) - relative_entropy_vec(rho, tilt)) <= 1e-4
    assert np.allclose(reduced_minimizer(SYS, BATH, N, EBAR), tilt, atol=1e-6)


def test_reduced_rate_linearization_improves_with_N():
    tilt = tilted_measure(SYS, k_theta(BATH, EBAR))
    rho = np.array([0.4, 0.6])
    gaps = [abs(reduced_rate(rho, SYS, BATH, N, EBAR) - relative_entropy_vec(rho, tilt)) for N in (2, 8, 32, 128)]
    assert all(a > b for a, b in zip(gaps[:-1], gaps[1:]))


def test_reduced_rate_out_of_domain():
    # Ebar - E(rho)/N < 0 when N = 1 and all system particles sit at energy 1
    assert reduced_rate(np.array([0.0, 1.0]), SYS, BATH, 1.0, 0.25) == math.inf


def test_microcanonical_examples():
    P = microcanonical_enumerate(SYS, BATH, 2, 2, 2.0)
    assert P[(1, 1)] == pytest.approx(4 / 6, abs=1e-14)
    assert microcanonical_enumerate(SYS, BATH, 3, 2, 0.0) == {(3, 0): 1.0}
    with pytest.raises(ValueError, match="infeasible energy"):
        microcanonical_enumerate(SYS, BATH, 2, 2, 7.0)


@pytest.mark.parametrize("n,m,total", [(2, 2, 1.0), (3, 4, 2.0), (4, 4, 3.0), (3, 3, 2.5)])
def test_microcanonical_matches_bruteforce(n, m, total):
    sys3 = FiniteSystem((0, 1, 2), [0.5, 0.3, 0.2], [0.0, 0.5, 1.5])
    bath = BathModel(FiniteSystem((0, 1), [0.6, 0.4], [0.0, 1.0]))
    try:
        a = microcanonical_enumerate(sys3, bath, n, m, total)
    except ValueError:
        with pytest.raises(ValueError):
            microcanonical_bruteforce(sys3, bath, n, m, total)
        return
    b = microcanonical_bruteforce(sys3, bath, n, m, total)
    assert a.keys() == b.keys()
    assert all(abs(a[k] - b[k]) < 1e-12 for k in a)


def test_ladder_gap_shrinks():
    gaps = []
    for n in (4, 8, 16):
        rep = ladder_report(SYS, BATH, n, 4, EBAR)
        gaps.append(abs(next(r["rate_gap"] for r in rep["table"] if r["composition"] == [n // 2, n // 2])))
    assert gaps[0] > gaps[1] > gaps[2]


def test_report_schema():
    rep = json.loads(report_json(ladder_report(SYS, BATH, 4, 2, EBAR)))
    assert set(rep) == {"n", "m", "N", "Ebar", "kT_effective", "table"}
    assert sum(r["prob"] for r in rep["table"]) == pytest.approx(1.0, abs=1e-12)
