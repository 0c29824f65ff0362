"""lowbit: quantization-aware training and post-training quantization at desk scale."""

__version__ = "0.1.0"
