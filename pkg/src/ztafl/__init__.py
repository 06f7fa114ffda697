"""Zero-trust federated learning simulator: attestation, stability-weighted aggregation,
adversarial training and an attack suite over an edge-fog-cloud round protocol."""
from .config import ExperimentConfig, preset
from .errors import InvalidInputError, InvalidStateError, NumericError, ShapeError
from .simulation import Simulation, run_experiment, run_seeds, sweep

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "InvalidInputError",
    "InvalidStateError",
    "NumericError",
    "ShapeError",
    "Simulation",
    "preset",
    "run_experiment",
    "run_seeds",
    "sweep",
]
