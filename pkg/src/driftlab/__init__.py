"""Instrumented single-block Transformer experiments on representation drift and anisotropy."""

__version__ = "0.1.0"
