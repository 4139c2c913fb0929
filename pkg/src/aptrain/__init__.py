"""Quantized training with layer-wise adaptive weight precision."""

from .nn import Network, build_network
from .policy import PolicyConfig
from .quantizer import QuantizedTensor, QuantParams, dequantize, fit_params, quantize
from .trainer import TrainConfig, TrainRecord, run_training

__all__ = [
    "Network", "PolicyConfig", "QuantParams", "QuantizedTensor", "TrainConfig",
    "TrainRecord", "build_network", "dequantize", "fit_params", "quantize", "run_training",
]
__version__ = "0.1.0"
