"""Hormonal crosstalk ODE model and its equilibrium outputs."""

from .model import (
    SPECIES, DomainError, ExperimentSpec, NonConverged, RateConstants, default_parameter_table,
    derivatives, jacobian, solve_steady_state, to_rate_constants,
)

__all__ = [
    "SPECIES", "DomainError", "ExperimentSpec", "NonConverged", "RateConstants",
    "default_parameter_table", "derivatives", "jacobian", "solve_steady_state",
    "to_rate_constants",
]
