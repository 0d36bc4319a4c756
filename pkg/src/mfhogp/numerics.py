"""Dense linear-algebra and RNG primitives used by every other module.

Everything here is a thin, contract-enforcing layer over numpy/scipy: jittered
Cholesky factorization with geometric escalation, Kronecker products with a
size guard, thin SVD, and a splittable deterministic RNG stream.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConvergenceFailure,
    DimensionMismatch,
    IndexOutOfRange,
    NotPositiveDefinite,
    OverflowingDimensions,
)

# Jitter escalation ladder: start at max(requested, floor), multiply by 10
# until factorization succeeds or the cap is passed.
JITTER_FLOOR = 1e-8
JITTER_MAX = 1e-2

# Dense results above this entry count are refused outright.
MAX_DENSE_ENTRIES = 100_000_000


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor plus the jitter that was actually applied."""

    lower: np.ndarray
    jitter_used: float
    jitter_requested: float

    @property
    def escalated(self) -> bool:
        return self.jitter_used > self.jitter_requested

    def logdet(self) -> float:
        """Log-determinant of the factored matrix (incl. jitter)."""
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))


def cholesky(a, jitter: float = 0.0) -> CholeskyFactor:
    """Factor ``a + jitter*I = L L^T`` with automatic jitter escalation.

    ``a`` must be square and symmetric up to roundoff; it is symmetrized
    before factoring. If the factorization fails at the requested jitter,
    the jitter is raised geometrically (x10, starting no lower than
    ``JITTER_FLOOR``) up to ``JITTER_MAX`` before giving up.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"cholesky needs a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NotPositiveDefinite("cholesky input contains non-finite entries")
    sym = 0.5 * (a + a.T)
    eye = np.eye(a.shape[0])
    requested = float(jitter)
    tried = requested
    try:
        return CholeskyFactor(np.linalg.cholesky(sym + tried * eye), tried, requested)
    except np.linalg.LinAlgError:
        pass
    tried = max(requested, JITTER_FLOOR)
    while tried <= JITTER_MAX * (1 + 1e-12):
        try:
            return CholeskyFactor(np.linalg.cholesky(sym + tried * eye), tried, requested)
        except np.linalg.LinAlgError:
            tried *= 10.0
    raise NotPositiveDefinite(
        f"matrix of shape {a.shape} not factorizable even at jitter {JITTER_MAX}"
    )


def kron(a, b) -> np.ndarray:
    """Kronecker product with a hard guard on the dense result size."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    entries = a.shape[0] * b.shape[0] * a.shape[1] * b.shape[1]
    if entries > MAX_DENSE_ENTRIES:
        raise OverflowingDimensions(
            f"kron result would hold {entries} entries (> {MAX_DENSE_ENTRIES})"
        )
    return np.kron(a, b)


def thin_svd(a, k: int):
    """Rank-``k`` thin SVD: returns ``(u, s, vt)`` with ``a ~= u @ diag(s) @ vt``.

    ``u`` has orthonormal columns, ``vt`` orthonormal rows, singular values
    sorted descending. ``k`` may be 0 (empty factors).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionMismatch(f"thin_svd needs a matrix, got shape {a.shape}")
    bound = min(a.shape)
    if not 0 <= k <= bound:
        raise IndexOutOfRange(f"rank {k} outside [0, {bound}] for shape {a.shape}")
    if k == 0:
        return (
            np.zeros((a.shape[0], 0)),
            np.zeros((0,)),
            np.zeros((0, a.shape[1])),
        )
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(f"svd failed to converge: {exc}") from exc
    return u[:, :k].copy(), s[:k].copy(), vt[:k, :].copy()


class RngStream:
    """Deterministic, splittable random stream (PCG64 under a seed tree).

    Two streams built from the same ``(seed, key path)`` replay bit-exactly;
    ``child(i)`` yields an independent stream addressed by index so parallel
    consumers never share state.
    """

    def __init__(self, seed: int, _key: tuple = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in _key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, index: int) -> "RngStream":
        if index < 0:
            raise IndexOutOfRange(f"child index must be >= 0, got {index}")
        return RngStream(self.seed, self.key + (int(index),))

    def standard_normal(self, *shape) -> np.ndarray:
        return self._gen.standard_normal(size=shape)

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), in increasing order."""
        if not 0 <= k <= n:
            raise IndexOutOfRange(f"cannot draw {k} from {n}")
        picked = self._gen.choice(n, size=k, replace=False)
        return np.sort(picked)


def standard_normal_matrix(rng: RngStream, rows: int, cols: int) -> np.ndarray:
    """Dense (rows, cols) draw of i.i.d. standard normals from ``rng``."""
    if rows < 0 or cols < 0:
        raise DimensionMismatch(f"negative shape ({rows}, {cols})")
    return rng.standard_normal(rows, cols)
