"""
elimpute

Empirical likelihood for estimating equations with data missing at random,
using kernel-based multiple imputation and bootstrap calibration.
"""

__version__ = "1.0.0"
