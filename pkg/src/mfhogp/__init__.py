"""Multi-fidelity high-order Gaussian process surrogates for PDE fields.

The package learns full solution fields of parametrized PDEs from a small
number of simulations run at mixed mesh fidelities. A nonlinear
coregionalization prior ties thousands of outputs together through a kernel
over learned CP-factorized bases, fidelities are chained through augmented
inputs, and inference runs by stochastic variational optimization of
matrix-normal posteriors over the per-level weight matrices.
"""

from .errors import MfhogpError

__all__ = ["MfhogpError"]
__version__ = "0.1.0"
