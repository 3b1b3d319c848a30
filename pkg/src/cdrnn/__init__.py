"""Continuous-time deconvolutional regressive neural networks."""
__version__ = "0.1.0"

from .data import EventStream, ResponseTable
from .estimator import CDRNNRegressor
from .exceptions import CDRNNError, ConfigError, DataError, NumericalError, TrainingError
from .model import (AssembledBatch, FittedModel, Hyperparameters, IrfBlockSpec, ModelSpec,
                    RandomFactor, Standardization, assemble_inputs, check_spec, validate_spec)
from .query import (interaction_surface, irf_curve, irf_surface, nonstationarity_slice,
                    reference_config)
from .stats import ensemble_fit, eval_loglik, permutation_test, split_data
from .synth import KernelSpec, SynthConfig, generate
from .trainer import TrainConfig, fit

__all__ = [
    "AssembledBatch", "CDRNNError", "CDRNNRegressor", "ConfigError", "DataError", "EventStream",
    "FittedModel", "Hyperparameters", "IrfBlockSpec", "KernelSpec", "ModelSpec", "NumericalError",
    "RandomFactor", "ResponseTable", "Standardization", "SynthConfig", "TrainConfig",
    "TrainingError", "assemble_inputs", "check_spec", "ensemble_fit", "eval_loglik", "fit",
    "generate", "interaction_surface", "irf_curve", "irf_surface", "nonstationarity_slice",
    "permutation_test", "reference_config", "split_data", "validate_spec",
]
