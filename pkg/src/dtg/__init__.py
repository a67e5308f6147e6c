"""Digital twin generator: a conditional Neural Boltzmann Machine for continuous-time patient trajectories."""

from .datamodel import DataError, PatientRecord, Schema, Variable, Visit, TTE
from .networks import NBMModel, NetConfig
from .nbm import SampleSet, TwinModel, generate_trajectory
from .training import LossWeights, TrainConfig, train

__all__ = [
    "DataError", "PatientRecord", "Schema", "Variable", "Visit", "TTE",
    "NBMModel", "NetConfig", "SampleSet", "TwinModel", "generate_trajectory",
    "LossWeights", "TrainConfig", "train",
]
__version__ = "0.1.0"
