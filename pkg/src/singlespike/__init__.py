"""Single-spike spiking network engine.

A sequential leaky integrate-and-fire simulator, a parallel fast path that
computes the same single-spike outputs without looping over time, training
utilities, datasets and a benchmark harness.
"""

from .errors import (
    ConfigError,
    DegenerateModelError,
    DimensionError,
    EncodingError,
    FormatError,
    LabelError,
    LengthError,
    NumericError,
    ParameterError,
    RateError,
    StateError,
)
from .fastpath import fast_backward, fast_forward, fast_layer_backward, fast_layer_forward, phi
from .neuron import LifNormalized, LifPhysical, SurrogateCfg, beta_from_tau, clip_beta, surrogate_grad
from .seqsim import LayerParams, seq_forward, seq_layer_backward, seq_layer_forward
from .training import Network, NetworkConfig, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DegenerateModelError", "DimensionError", "EncodingError", "FormatError",
    "LabelError", "LengthError", "NumericError", "ParameterError", "RateError", "StateError",
    "fast_backward", "fast_forward", "fast_layer_backward", "fast_layer_forward", "phi",
    "LifNormalized", "LifPhysical", "SurrogateCfg", "beta_from_tau", "clip_beta", "surrogate_grad",
    "LayerParams", "seq_forward", "seq_layer_backward", "seq_layer_forward",
    "Network", "NetworkConfig", "TrainConfig", "evaluate", "train",
]
