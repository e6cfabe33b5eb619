"""Clustered Bayesian estimation of longitudinal drug-symptom effect graphs
from ordinal panel data, with simulation tooling, posterior summaries, and
regimen-ranking predictions."""

__version__ = "0.1.0"

from .dataset import ColumnSchema, Dataset, Participant, Visit, load_dataset, save_dataset, validate
from .model import ChainState, ClusterParams, Hyperparams
from .sampler import ChainSamples, GibbsSampler, SamplerConfig, run_chain
from .simulate import GroundTruth, ScenarioConfig, simulate_dataset

__all__ = [
    "ChainSamples",
    "ChainState",
    "ClusterParams",
    "ColumnSchema",
    "Dataset",
    "GibbsSampler",
    "GroundTruth",
    "Hyperparams",
    "Participant",
    "SamplerConfig",
    "ScenarioConfig",
    "Visit",
    "__version__",
    "load_dataset",
    "run_chain",
    "save_dataset",
    "simulate_dataset",
    "validate",
]
