"""Embarrassingly parallel MCMC with invertible density approximations.

Subposteriors are sampled independently, approximated by real NVP flows,
shipped as compact binary blobs and recombined on a coordinator by a
bounded-weight sampling/importance-resampling scheme, with consensus and
Gaussian-product baselines and the metrics to compare them.
"""

from . import aggregate, flow, metrics, models, nn, samplers
from .aggregate import (
    GaussianDensity,
    SubposteriorEnsemble,
    consensus_merge,
    nap_log_weights,
    nap_sir,
    parametric_merge,
)
from .experiment import ExperimentConfig, emit_results, run_experiment, sweep
from .flow import FlowArchitecture, FlowModel, TrainConfig, deserialize, fit, serialize
from .models import Dataset, ModelSpec, generate, shard, subposterior
from .samplers import McmcConfig, SampleSet, TargetModel, effective_sample_size

__all__ = [
    "aggregate", "flow", "metrics", "models", "nn", "samplers",
    "GaussianDensity", "SubposteriorEnsemble", "consensus_merge",
    "nap_log_weights", "nap_sir", "parametric_merge",
    "ExperimentConfig", "emit_results", "run_experiment", "sweep",
    "FlowArchitecture", "FlowModel", "TrainConfig", "deserialize", "fit",
    "serialize",
    "Dataset", "ModelSpec", "generate", "shard", "subposterior",
    "McmcConfig", "SampleSet", "TargetModel", "effective_sample_size",
]

__version__ = "0.1.0"
