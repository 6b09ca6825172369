"""Simulation and verification laboratory for canonical point processes on the
Riemann sphere.

The package implements a weighted Coulomb-type gas of N points on the sphere
whose pair interaction comes from a determinantal section norm, together with
the mean-field (continuum) objects the gas converges to: Green-function
energies, entropy-regularized free energies, and curvature equations solved on
an equal-area grid.  Module map:

    geometry   charts, grid, Green function, divisors, base measures
    energy     configuration energies, Gram matrices, basis changes
    sampler    Metropolis chains with incremental pair-sum updates
    meanfield  Poisson / curvature solvers, energy functionals, projections
    thermo     partition quadrature, thermodynamic integration, thresholds
    analysis   Wasserstein distances and convergence probes
    cli        experiment runner (sample|meanfield|partition|threshold|scan|probe|compare)
    report     matplotlib figure rendering for run outputs
"""

__version__ = "0.1.0"

from . import energy, geometry, sampler, thermo

__all__ = [
    "energy",
    "geometry",
    "sampler",
    "thermo",
    "__version__",
]
