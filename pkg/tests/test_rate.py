import json

import numpy as np
import pytest

from ldpflow.experiments import defect_ladder, fdt_paths
from ldpflow.measures import EnergySpec, Grid, GridMeasure, MeasurePath, OccupationProfile
from ldpflow.pde import PdeConfig, heat_solve
from ldpflow.rate import (
    MobilityKind,
    check_legendre_pair,
    cross_term,
    fdt_gap,
    gradflow_defect,
    linear_path,
    onsager_apply,
    rate_fk,
    rate_psi,
    rate_quadratic,
)
from ldpflow.scalar import DissipationPair, generalized_flow_solve, quadratic_energy


def _const_path(rho, K=4):
    return MeasurePath(np.linspace(0, 1, K + 1), (rho,) * (K + 1))


def test_onsager_cases():
    g = Grid(512, 1.0, "torus")
    one = GridMeasure.uniform(g)
    assert np.allclose(onsager_apply(np.full(512, 3.0), one), 0.0)
    xi = np.sin(2 * np.pi * g.centers)
    assert np.allclose(onsager_apply(xi, one), 4 * np.pi**2 * xi, atol=1e-3 * 4 * np.pi**2)


def test_mobility_vanishing_errors():
    g = Grid(8, 1.0, "torus")
    with pytest.raises(ValueError, match="mobility vanishes"):
        MobilityKind("ssep").cell_values(OccupationProfile(g, np.ones(8)))
    with pytest.raises(ValueError, match="mobility vanishes"):
        MobilityKind().cell_values(GridMeasure(g, np.r_[0.0, np.full(7, 1 / 7)]))


def test_stationary_paths_vanish():
    g = Grid(32, 1.0, "interval")
    u = _const_path(GridMeasure.uniform(g))
    assert gradflow_defect(u, EnergySpec()) == pytest.approx(0.0, abs=1e-20)
    assert rate_quadratic(u, EnergySpec()) == pytest.approx(0.0, abs=1e-20)


def test_heat_defect_refines_to_zero():
    fwd, rev = defect_ladder("wasserstein", [(32, 10), (64, 20), (128, 40)], 0.05)
    assert np.all(fwd[:-1] / fwd[1:] >= 2)
    assert rev.min() > 10 * fwd[-1]


def test_ssep_defect_refines_to_zero():
    fwd, rev = defect_ladder("ssep", [(32, 10), (64, 20), (128, 40)], 0.05)
    assert np.all(fwd[:-1] / fwd[1:] >= 2)
    assert rev.min() > 10 * fwd[-1]


def test_chain_rule_on_heat_path():
    g = Grid(64, 1.0, "torus")
    p = heat_solve(GridMeasure.from_function(g, lambda x: 1 + 0.5 * np.cos(2 * np.pi * x)), PdeConfig(g, 1e-3, 0.05))
    d = gradflow_defect(p, EnergySpec())
    q = rate_quadratic(p, EnergySpec())
    assert abs(q - d) <= 1e-4 * (1 + d)


def test_report_json():
    g = Grid(16, 1.0, "torus")
    p = heat_solve(GridMeasure.from_function(g, lambda x: 1 + 0.5 * np.cos(2 * np.pi * x)), PdeConfig(g, 1e-3, 0.01))
    rep = gradflow_defect(p, EnergySpec(), report=True)
    d = json.loads(rep.to_json())
    assert len(d["per_interval"]) == 10 and d["refinement_metadata"]["n_cells"] == 16


def test_rate_psi_zero_on_flow_and_pair_check():
    pair = DissipationPair("birth_death", 1.0)
    t, u = generalized_flow_solve(quadratic_energy(), pair, 1.0, 1.0, 1e-3)
    assert abs(rate_psi(t, u, quadratic_energy(), pair)) < 1e-6
    assert rate_psi(t, u[::-1], quadratic_energy(), pair) > 0.1


def test_legendre_check_rejects_wrong_pair():
    class Broken(DissipationPair):
        def psi_star(self, v, u=0.0):
            return 0.5 * np.asarray(v) ** 2 + 0.1

    with pytest.raises(ValueError, match="not a Legendre pair"):
        check_legendre_pair(Broken("quadratic"), 0.0)
    assert check_legendre_pair(DissipationPair("spin_flip"), 0.3) < 1e-8


def test_fdt_matched_is_exact_differential():
    g, p = fdt_paths(128)
    psi = np.cos(2 * np.pi * g.centers)
    assert fdt_gap(p, psi, None, 1.0, 1.0) <= 1e-6
    assert fdt_gap(p, None, None, 1.0, 2.0) <= 1e-6


def test_fdt_varying_noise_breaks_exactness():
    g, p = fdt_paths(128)
    psi = np.cos(2 * np.pi * g.centers)
    s2 = 1 + 0.5 * np.sin(2 * np.pi * g.centers)
    assert fdt_gap(p, psi, None, 1.0, s2) >= 1e-3


def test_fdt_requires_shared_endpoints():
    g, p = fdt_paths(32)
    other = linear_path(p.slices[0], p.slices[-2], len(p) - 1)
    with pytest.raises(ValueError):
        fdt_gap(p, None, None, 1.0, 1.0, reference=other)


def test_cross_term_equals_free_energy_change():
    g, p = fdt_paths(128)
    psi = np.cos(2 * np.pi * g.centers)
    F = EnergySpec("free_energy", potential=psi)
    dF = F.value(p.slices[-1]) - F.value(p.slices[0])
    assert cross_term(p, psi, None, 1.0, 1.0) == pytest.approx(dF, abs=1e-6)


def test_rate_fk_vanishes_on_solution():
    vals = []
    for n, K in ((32, 10), (64, 20)):
        g = Grid(n, 1.0, "torus")
        rho0 = GridMeasure.from_function(g, lambda x: 1 + 0.5 * np.cos(2 * np.pi * x))
        p = heat_solve(rho0, PdeConfig(g, 0.02 / K, 0.02))
        vals.append(rate_fk(p, None, None, 1.0, 1.0))
    assert vals[1] < vals[0] < 1e-6
