"""Covariance kernels over inputs and over learned bases.

Two families: an ARD RBF kernel (log-parameterized lengthscales and
amplitude) and an exact-match delta kernel. ``BasesKernel`` tags an RBF
applied to the concatenated CP factor vectors of basis rows, which is what
ties distinct outputs together in the coregionalization prior; swapping it
for a ``DeltaKernel`` recovers classic linear coregionalization.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch


@dataclass
class RbfKernel:
    """k(a, b) = exp(log_amplitude) * exp(-0.5 * sum_d ((a_d-b_d)/l_d)^2)."""

    log_lengthscales: np.ndarray
    log_amplitude: float = 0.0

    def __post_init__(self):
        self.log_lengthscales = np.atleast_1d(
            np.asarray(self.log_lengthscales, dtype=np.float64)
        )
        self.log_amplitude = float(self.log_amplitude)


@dataclass
class DeltaKernel:
    """k(a, b) = exp(log_amplitude) * 1[a == b exactly]."""

    log_amplitude: float = 0.0


@dataclass
class BasesKernel:
    """RBF over concatenated CP factor vectors of basis rows."""

    inner: RbfKernel = field(default=None)


def _check_inputs(a, b, dims):
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"input widths differ: {a.shape[1]} vs {b.shape[1]}")
    if dims is not None and a.shape[1] != dims:
        raise DimensionMismatch(
            f"kernel has {dims} lengthscales but inputs have width {a.shape[1]}"
        )
    return a, b


def _scaled_sqdist(kernel: RbfKernel, a, b, same: bool):
    inv = np.exp(-kernel.log_lengthscales)
    asc = a * inv
    bsc = asc if same else b * inv
    aa = np.sum(asc * asc, axis=1)[:, None]
    bb = aa.T if same else np.sum(bsc * bsc, axis=1)[None, :]
    q = aa + bb - 2.0 * (asc @ bsc.T)
    np.maximum(q, 0.0, out=q)
    if same:
        np.fill_diagonal(q, 0.0)
    return q, asc, bsc


def gram(kernel, a, b) -> np.ndarray:
    """Dense covariance matrix between the rows of ``a`` and ``b``."""
    if isinstance(kernel, BasesKernel):
        return gram(kernel.inner, a, b)
    if isinstance(kernel, DeltaKernel):
        a, b = _check_inputs(a, b, None)
        eq = np.all(a[:, None, :] == b[None, :, :], axis=-1) if a.shape[1] else np.ones(
            (a.shape[0], b.shape[0]), dtype=bool
        )
        return np.exp(kernel.log_amplitude) * eq.astype(np.float64)
    if isinstance(kernel, RbfKernel):
        a, b = _check_inputs(a, b, kernel.log_lengthscales.shape[0])
        same = a is b or (a.shape == b.shape and np.array_equal(a, b))
        q, _, _ = _scaled_sqdist(kernel, a, b, same)
        return np.exp(kernel.log_amplitude - 0.5 * q)
    raise DimensionMismatch(f"unknown kernel type {type(kernel).__name__}")


def gram_gradient(kernel, a, b) -> dict:
    """Analytic derivatives of ``gram`` w.r.t. each log hyperparameter.

    Returns a dict: ``"log_amplitude"`` maps to an (n, m) matrix and, for
    RBF kernels, ``"log_lengthscales"`` maps to a (D, n, m) stack.
    """
    if isinstance(kernel, BasesKernel):
        return gram_gradient(kernel.inner, a, b)
    if isinstance(kernel, DeltaKernel):
        return {"log_amplitude": gram(kernel, a, b)}
    if isinstance(kernel, RbfKernel):
        a, b = _check_inputs(a, b, kernel.log_lengthscales.shape[0])
        k = gram(kernel, a, b)
        inv = np.exp(-kernel.log_lengthscales)
        # d k / d log(l_d) = k * ((a_d - b_d) / l_d)^2
        diff = (a[:, None, :] - b[None, :, :]) * inv
        dls = np.transpose(diff * diff, (2, 0, 1)) * k[None, :, :]
        return {"log_amplitude": k, "log_lengthscales": dls}
    raise DimensionMismatch(f"unknown kernel type {type(kernel).__name__}")
