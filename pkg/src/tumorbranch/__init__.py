"""Absorbed Markov chains with branching immigration.

Simulation and numerical verification for a particle system whose particles
move as an absorbed Markov chain while the whole population seeds new
particles at type 1: growth criticality, quasi-stationary (Yaglom) limits,
R-positivity certificates, Perron spectral triples, and an exact event-driven
simulator, tied together by a reproducible CLI.
"""

from .chain import (
    AbsorbedRates,
    DecayEstimate,
    DistributionOverTypes,
    build_gompertz_bd,
    build_sparse_rates,
    decay_estimate,
    evolve,
    expected_hitting_time,
    green_solve,
    load_triple_file,
    semigroup_row,
    time_one_kernel,
    yaglom_iterate,
)

__version__ = "0.1.0"

__all__ = [
    "AbsorbedRates",
    "DecayEstimate",
    "DistributionOverTypes",
    "build_gompertz_bd",
    "build_sparse_rates",
    "decay_estimate",
    "evolve",
    "expected_hitting_time",
    "green_solve",
    "load_triple_file",
    "semigroup_row",
    "time_one_kernel",
    "yaglom_iterate",
    "__version__",
]
