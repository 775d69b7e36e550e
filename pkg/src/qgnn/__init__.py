"""Quantization-aware training and integer inference for message-passing GNNs."""

__version__ = "0.1.0"
