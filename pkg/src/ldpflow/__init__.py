"""
Gradient flows of measures and their large-deviation rate functionals.

Discrete densities on 1-D grids, optimal transport, PDE and
minimizing-movement solvers, pathwise rate functionals, stochastic particle
simulators, scalar generalized flows and a finite heat-bath model.
"""
from .measures import EnergySpec, Grid, GridMeasure, MeasurePath, OccupationProfile, ParticleCloud

__all__ = ["EnergySpec", "Grid", "GridMeasure", "MeasurePath", "OccupationProfile", "ParticleCloud"]
__version__ = "0.1.0"
