"""Stochastically quantized VAEs (Gaussian and von Mises-Fisher) with the
VQ-VAE family of baselines, on a small reverse-mode autodiff engine."""

from .autodiff import NumericError, ShapeError, Tensor, backward, finite_difference_check
from .codebook import Codebook, UsageStats, perplexity
from .data import Dataset, DataFormatError, synth_categorical, synth_continuous
from .quantizer import QuantizationOutput, stochastic_quantize, deterministic_quantize
from .training import RunState, TrainConfig, evaluate, train, train_step
from .variance import VarianceParam

__version__ = "0.1.0"

__all__ = [
    "Codebook", "DataFormatError", "Dataset", "NumericError", "QuantizationOutput",
    "RunState", "ShapeError", "Tensor", "TrainConfig", "UsageStats", "VarianceParam",
    "backward", "deterministic_quantize", "evaluate", "finite_difference_check",
    "perplexity", "stochastic_quantize", "synth_categorical", "synth_continuous", "train",
    "train_step",
]
