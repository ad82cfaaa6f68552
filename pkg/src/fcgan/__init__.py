"""WGAN-GP synthesis and qualification of fuel-cell test-bench tables."""

__version__ = "0.1.0"
