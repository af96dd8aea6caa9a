"""Unbiased noise injection for recurrent networks."""

from .noise import Mode, NoiseSpec
from .model import NoisinModel, Placement, build_model, noisy_forward

__version__ = "0.1.0"

__all__ = ["Mode", "NoiseSpec", "NoisinModel", "Placement", "build_model", "noisy_forward", "__version__"]
