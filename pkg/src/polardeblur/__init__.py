"""Deblurring of polarized image sets (four polarizer angles) with a
two-stage network, plus synthetic data generation and evaluation."""

__version__ = "0.1.0"
