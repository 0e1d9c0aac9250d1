from .core import ConfigError, Module, NumericError, Parameter
from .gradcheck import finite_diff_check
from .layers import (GELU, MLP, BatchNorm2d, Conv2d, ConvBNAct, DownSampling, LayerNorm,
                     LeakyReLU, Linear, LoRALinear, MultiHeadAttention, TransformerBlock, gelu,
                     gelu_grad, leaky_relu, set_adapters_enabled, softmax)

__all__ = [
    "BatchNorm2d", "ConfigError", "Conv2d", "ConvBNAct", "DownSampling", "GELU", "LayerNorm",
    "LeakyReLU", "Linear", "LoRALinear", "MLP", "Module", "MultiHeadAttention", "NumericError",
    "Parameter", "TransformerBlock", "finite_diff_check", "gelu", "gelu_grad", "leaky_relu",
    "set_adapters_enabled", "softmax",
]
