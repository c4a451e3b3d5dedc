"""Learned KKL observers for input-affine nonlinear systems."""

__version__ = "0.1.0"
