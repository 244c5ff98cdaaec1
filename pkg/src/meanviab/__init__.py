"""Mean-viability and quasi-tangency tools for path-dependent stochastic control."""

from .errors import (ConfigError, DomainError, MeanViabError, PreconditionError, SimulationError,
                     StructuralError)
from .paths import Path, PathEnsemble, TimeGrid, path_distance, running_sup_norm, stop_path
from .problem import (AnchorTriple, CandidateFunction, Coefficients, ControlSpace, ProblemSpec, TargetSet,
                      TerminalCost, check_A1_nonanticipativity, check_A2, check_H)
from .sde import ControlProcess, PerturbationProcess, simulate_controlled, simulate_frozen_shifted, simulate_perturbed

__version__ = "0.1.0"

__all__ = [
    "AnchorTriple", "CandidateFunction", "Coefficients", "ConfigError", "ControlProcess", "ControlSpace",
    "DomainError", "MeanViabError", "Path", "PathEnsemble", "PerturbationProcess", "PreconditionError",
    "ProblemSpec", "SimulationError", "StructuralError", "TargetSet", "TerminalCost", "TimeGrid",
    "check_A1_nonanticipativity", "check_A2", "check_H", "path_distance", "running_sup_norm",
    "simulate_controlled", "simulate_frozen_shifted", "simulate_perturbed", "stop_path",
]
