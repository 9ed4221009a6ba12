"""Federated learning with nested sub-networks, quantized downlink and server fine-tuning."""

from .codec import QuantizedPayload, dequantize, quantize
from .config import ExperimentConfig, load_config
from .experiments import build_environment, mix_sweep, run_mode
from .nn import ElasticArch, ElasticModel, SubNetworkSpec, init_model
from .protocol import Mode, ProtocolConfig, run_experiment, run_round

__all__ = [
    "ElasticArch",
    "ElasticModel",
    "ExperimentConfig",
    "Mode",
    "ProtocolConfig",
    "QuantizedPayload",
    "SubNetworkSpec",
    "build_environment",
    "dequantize",
    "init_model",
    "load_config",
    "mix_sweep",
    "quantize",
    "run_experiment",
    "run_mode",
    "run_round",
]

__version__ = "0.1.0"
