"""Two-stage stochastic OPF for radial feeders with scenario decomposition."""

from .atc import AtcConfig, AtcResult, run_atc
from .bench import ExperimentConfig, obj_err, run_experiment, speedup
from .conic import ClarabelBackend, ConicProgram, CvxoptBackend, solve
from .estimators import ATCDecomposition, CentralizedOPF
from .grid import CostCoefficients, NetworkModel, duplicate_system, ieee33, load_network
from .opf import build_centralized, extract_dispatch
from .scenarios import preset

__version__ = "0.1.0"

__all__ = [
    "AtcConfig",
    "AtcResult",
    "run_atc",
    "ExperimentConfig",
    "obj_err",
    "run_experiment",
    "speedup",
    "ClarabelBackend",
    "ConicProgram",
    "CvxoptBackend",
    "solve",
    "ATCDecomposition",
    "CentralizedOPF",
    "CostCoefficients",
    "NetworkModel",
    "duplicate_system",
    "ieee33",
    "load_network",
    "build_centralized",
    "extract_dispatch",
    "preset",
]
