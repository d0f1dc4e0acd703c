"""Compression toolkit for Gaussian-splat scenes: joint structured pruning
and per-attribute mixed-precision quantization on a differentiable CPU
renderer."""

__version__ = "0.1.0"
