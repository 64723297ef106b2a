"""chisum: certified densities for positive linear combinations of chi-squares.

The package computes two-sided envelopes (rigorous lower and upper bounds)
for the probability density and CDF of sums sum_i w_i X_i with X_i ~ chi^2_r,
by exact convolution in an algebra of exponential-times-monomial terms, and
applies them to a random-matrix vacuum-counting problem.
"""

__version__ = "0.1.0"

from .precision_math import BigReal, DEFAULT_PRECISION_BITS, MIN_PRECISION_BITS

__all__ = ["BigReal", "DEFAULT_PRECISION_BITS", "MIN_PRECISION_BITS", "__version__"]
