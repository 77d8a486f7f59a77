"""Hierarchical quantized autoencoders with stochastic quantization, in NumPy."""
__version__ = "0.1.0"
