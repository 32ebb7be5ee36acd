"""Spectral branch attribution for multi-branch spoofing detectors.

Activation covariance spectra per (sample, component) feed a gradient-boosted
meta-classifier; exact TreeSHAP values are then aggregated into per-branch
attribution sums, dispersion-penalized confidences and softmax shares, and
combined with detector error rates to label each attack's strategy.
"""

from .errors import BranchscopeError, ConfigError, DataError

__version__ = "0.1.0"

__all__ = ["BranchscopeError", "ConfigError", "DataError", "__version__"]
