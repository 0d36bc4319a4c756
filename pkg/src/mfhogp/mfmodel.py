"""Deep multi-fidelity model state: CP bases, noise ladder, joint density.

Fidelity levels are chained bottom-up. Level i owns K new basis rows stored
in CP form (each row is the Kronecker product of R short factor vectors,
truncated to the first d entries), and its weight matrix W^(i) covers the
stacked bases of levels 1..i. Inputs at level i > 1 are augmented with the
previous level's weight rows at the same (nested) design points, which is
what makes the fidelity coupling nonlinear. Observation noise compounds
down the ladder: the effective precision at level i is the running product
of per-level Gamma-prior precisions.

This module holds the state containers and exact (non-variational) joint
density; stochastic training lives in ``svi`` and prediction in ``predict``.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels, matnorm, numerics
from .errors import (
    DimensionMismatch,
    IndexMapInvalid,
    InvalidCounts,
    IndexOutOfRange,
)

LOG_2PI = float(np.log(2.0 * np.pi))

# Default jitter for gram factorizations throughout the model.
GRAM_JITTER = 1e-8

# Input-kernel initialization for refinement levels (level >= 2). These
# kernels act on [x, w_prev] and model the map from a coarse solution to
# the next fidelity. That map is usually a smooth, nearly linear
# correction, and the handful of high-fidelity examples cannot pull an
# interpolating short-lengthscale optimum back out of its basin, so the
# kernel starts long (near-linear regime) with amplitude scaled up to
# keep the slope variance sigma^2/l^2 at a useful size. Training shortens
# the lengthscales per dimension when the residual map is genuinely
# nonlinear; the reverse escape has almost no gradient signal.
REFINEMENT_LENGTHSCALE = 100.0
REFINEMENT_AMPLITUDE = 10.0


def factor_lengths(d: int, cp_order: int) -> tuple:
    """Per-factor lengths for CP rows expanding to >= d entries.

    Lengths come from {floor(d^(1/R)), ceil(d^(1/R))}, taking the smallest
    product that reaches d; expanded rows are truncated to d.
    """
    if d < 1 or cp_order < 1:
        raise IndexOutOfRange(f"need d >= 1 and order >= 1, got {d}, {cp_order}")
    if cp_order == 1:
        return (d,)
    root = d ** (1.0 / cp_order)
    near = int(round(root))
    if near >= 1 and near**cp_order == d:
        return (near,) * cp_order
    lo = max(int(math.floor(root)), 1)
    hi = lo + 1
    for n_hi in range(cp_order + 1):
        prod = lo ** (cp_order - n_hi) * hi**n_hi
        if prod >= d:
            return (lo,) * (cp_order - n_hi) + (hi,) * n_hi
    raise IndexOutOfRange(f"no factorization found for d={d}, order={cp_order}")


@dataclass
class CpBasisBlock:
    """K basis rows in CP form: row j = kron(factors[0][j], ..., factors[R-1][j])."""

    factors: tuple
    d: int

    def __post_init__(self):
        self.factors = tuple(np.atleast_2d(np.asarray(f, np.float64)) for f in self.factors)
        counts = {f.shape[0] for f in self.factors}
        if len(counts) != 1:
            raise DimensionMismatch(f"factor row counts differ: {sorted(counts)}")
        expanded = int(np.prod([f.shape[1] for f in self.factors]))
        if expanded < self.d:
            raise DimensionMismatch(
                f"factors expand to {expanded} entries < d={self.d}"
            )

    @property
    def num_bases(self) -> int:
        return self.factors[0].shape[0]

    @property
    def params_per_basis(self) -> int:
        return int(sum(f.shape[1] for f in self.factors))

    @property
    def compression_ratio(self) -> float:
        """Fraction of storage saved relative to dense K x d rows."""
        return 1.0 - self.params_per_basis / self.d


def expand_basis(block: CpBasisBlock, j: int) -> np.ndarray:
    """Dense length-d expansion of basis row ``j``."""
    if not 0 <= j < block.num_bases:
        raise IndexOutOfRange(f"basis {j} outside [0, {block.num_bases})")
    row = block.factors[0][j]
    for f in block.factors[1:]:
        row = np.outer(row, f[j]).reshape(-1)
    return row[: block.d]


def expand_block(block: CpBasisBlock) -> np.ndarray:
    """Dense (K, d) expansion of all rows at once."""
    rows = block.factors[0]
    for f in block.factors[1:]:
        rows = (rows[:, :, None] * f[:, None, :]).reshape(rows.shape[0], -1)
    return rows[:, : block.d]


@dataclass
class MultiFidelityDataset:
    """Nested-design training data plus an optional held-out test split.

    ``xs[i]`` is (N_i, s), ``ys[i]`` is (N_i, d); ``parent_maps[i]`` (i >= 1)
    gives, for each level-(i+1) row, its row index in level i, and the
    level-(i+1) inputs must literally equal those mapped rows.
    """

    xs: list
    ys: list
    parent_maps: list
    x_test: np.ndarray = None
    y_test: np.ndarray = None

    def __post_init__(self):
        self.xs = [np.atleast_2d(np.asarray(x, np.float64)) for x in self.xs]
        self.ys = [np.atleast_2d(np.asarray(y, np.float64)) for y in self.ys]
        self.parent_maps = [
            None if m is None else np.asarray(m, dtype=np.intp) for m in self.parent_maps
        ]

    @property
    def num_levels(self) -> int:
        return len(self.xs)

    @property
    def counts(self) -> tuple:
        return tuple(x.shape[0] for x in self.xs)

    @property
    def input_dim(self) -> int:
        return self.xs[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.ys[0].shape[1]

    def validate(self) -> None:
        if not self.xs or len(self.xs) != len(self.ys):
            raise DimensionMismatch("xs and ys must be parallel non-empty lists")
        if len(self.parent_maps) != len(self.xs):
            raise DimensionMismatch("need one parent map slot per level")
        if self.parent_maps[0] is not None:
            raise IndexMapInvalid("level 1 cannot have a parent map")
        counts = self.counts
        if any(c <= 0 for c in counts):
            raise InvalidCounts(f"counts must be positive, got {counts}")
        if any(b > a for a, b in zip(counts, counts[1:])):
            raise InvalidCounts(f"counts must be non-increasing, got {counts}")
        for i, (x, y) in enumerate(zip(self.xs, self.ys)):
            if x.shape[1] != self.input_dim or y.shape[1] != self.output_dim:
                raise DimensionMismatch(f"level {i + 1} widths differ from level 1")
            if x.shape[0] != y.shape[0]:
                raise DimensionMismatch(f"level {i + 1} has {x.shape[0]} x {y.shape[0]} rows")
        for i in range(1, self.num_levels):
            m = self.parent_maps[i]
            if m is None:
                raise IndexMapInvalid(f"level {i + 1} is missing its parent map")
            if m.shape != (counts[i],):
                raise IndexMapInvalid(
                    f"level {i + 1} map has shape {m.shape}, expected ({counts[i]},)"
                )
            if m.size and (m.min() < 0 or m.max() >= counts[i - 1]):
                raise IndexMapInvalid(f"level {i + 1} map points outside level {i}")
            if not np.array_equal(self.xs[i], self.xs[i - 1][m]):
                raise IndexMapInvalid(
                    f"level {i + 1} inputs are not the mapped level-{i} rows"
                )


def augment_inputs(x, w_prev, index_map=None) -> np.ndarray:
    """Append previous-level weight rows to raw inputs.

    With ``index_map`` given, ``w_prev`` holds one row per *parent* design
    point and is gathered; otherwise it must already have one row per row
    of ``x``.
    """
    x = np.atleast_2d(np.asarray(x, np.float64))
    w_prev = np.atleast_2d(np.asarray(w_prev, np.float64))
    if index_map is not None:
        index_map = np.asarray(index_map, dtype=np.intp)
        if index_map.shape != (x.shape[0],):
            raise IndexMapInvalid(
                f"map has shape {index_map.shape}, expected ({x.shape[0]},)"
            )
        if index_map.size and (
            index_map.min() < 0 or index_map.max() >= w_prev.shape[0]
        ):
            raise IndexMapInvalid("map points outside the previous level")
        w_prev = w_prev[index_map]
    if w_prev.shape[0] != x.shape[0]:
        raise DimensionMismatch(
            f"{w_prev.shape[0]} weight rows for {x.shape[0]} inputs"
        )
    return np.hstack([x, w_prev])


@dataclass
class ModelConfig:
    num_bases: int
    cp_order: int
    num_levels: int
    output_dim: int
    input_dim: int
    alpha: float
    factor_lens: tuple
    level_counts: tuple


@dataclass
class ModelState:
    """All free parameters keyed by path, plus the structural config."""

    config: ModelConfig
    params: dict
    trained: bool = False

    def copy(self) -> "ModelState":
        return ModelState(
            self.config, {k: v.copy() for k, v in self.params.items()}, self.trained
        )


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(y):
    return float(np.log(np.expm1(y)))


def param_names(config: ModelConfig) -> list:
    names = []
    for i in range(1, config.num_levels + 1):
        for r in range(config.cp_order):
            names.append(f"cp/{i}/{r}")
        names += [
            f"input_kern/{i}/log_ls",
            f"input_kern/{i}/log_amp",
            f"bases_kern/{i}/log_ls",
            f"bases_kern/{i}/log_amp",
            f"vi/{i}/mean",
            f"vi/{i}/row_raw",
            f"vi/{i}/col_raw",
        ]
    names.append("log_eta")
    return names


def init_model(
    data: MultiFidelityDataset,
    num_bases: int,
    cp_order: int,
    seed: int,
    alpha: float = 2.0,
) -> ModelState:
    """Fresh model state for ``data`` with seeded random CP factors.

    Factor entries start at scale K^(-1/(2R)) so expanded basis entries have
    variance 1/K; variational posteriors start near-deterministic at zero
    mean; all log precisions start at log(alpha). The level-1 input kernel
    starts at the per-dimension spread of the training inputs; refinement
    levels start long and wide (see REFINEMENT_LENGTHSCALE).
    """
    data.validate()
    if num_bases < 1 or cp_order < 1:
        raise InvalidCounts(f"need K >= 1 and R >= 1, got {num_bases}, {cp_order}")
    if alpha <= 1.0:
        raise InvalidCounts(f"Gamma shape must exceed 1, got {alpha}")
    d, s, levels = data.output_dim, data.input_dim, data.num_levels
    lens = factor_lengths(d, cp_order)
    config = ModelConfig(
        num_bases, cp_order, levels, d, s, float(alpha), lens, data.counts
    )
    rng = numerics.RngStream(seed)
    factor_std = num_bases ** (-1.0 / (2.0 * cp_order))
    x1_std = np.maximum(data.xs[0].std(axis=0), 1e-2)
    raw_diag = _softplus_inv(0.1)
    params = {}
    for i in range(1, levels + 1):
        level_rng = rng.child(i)
        for r, m in enumerate(lens):
            params[f"cp/{i}/{r}"] = factor_std * level_rng.child(r).standard_normal(
                num_bases, m
            )
        n_i = data.counts[i - 1]
        p_i = i * num_bases
        aug = (i - 1) * num_bases
        if i == 1:
            params["input_kern/1/log_ls"] = np.log(x1_std)
            params["input_kern/1/log_amp"] = np.zeros(())
        else:
            params[f"input_kern/{i}/log_ls"] = np.full(
                s + aug, np.log(REFINEMENT_LENGTHSCALE)
            )
            params[f"input_kern/{i}/log_amp"] = np.asarray(
                np.log(REFINEMENT_AMPLITUDE)
            )
        params[f"bases_kern/{i}/log_ls"] = np.full(
            sum(lens), np.log(max(factor_std, 0.1))
        )
        params[f"bases_kern/{i}/log_amp"] = np.zeros(())
        params[f"vi/{i}/mean"] = np.zeros((n_i, p_i))
        params[f"vi/{i}/row_raw"] = np.eye(n_i) * raw_diag
        params[f"vi/{i}/col_raw"] = np.eye(p_i) * raw_diag
    params["log_eta"] = np.full(levels, np.log(alpha))
    return ModelState(config, params)


def cp_block(state: ModelState, level: int) -> CpBasisBlock:
    c = state.config
    if not 1 <= level <= c.num_levels:
        raise IndexOutOfRange(f"level {level} outside [1, {c.num_levels}]")
    return CpBasisBlock(
        tuple(state.params[f"cp/{level}/{r}"] for r in range(c.cp_order)), c.output_dim
    )


def stacked_bases(state: ModelState, level: int) -> np.ndarray:
    """Dense (level*K, d) matrix of all bases up to ``level``, recomputed
    from the current CP factors on every call (views track mutations)."""
    return np.vstack([expand_block(cp_block(state, i)) for i in range(1, level + 1)])


def bases_features(state: ModelState, level: int) -> np.ndarray:
    """Concatenated CP factor vectors per basis row, stacked over levels."""
    c = state.config
    return np.vstack(
        [
            np.hstack([state.params[f"cp/{i}/{r}"] for r in range(c.cp_order)])
            for i in range(1, level + 1)
        ]
    )


def input_kernel(state: ModelState, level: int) -> kernels.RbfKernel:
    return kernels.RbfKernel(
        state.params[f"input_kern/{level}/log_ls"],
        float(state.params[f"input_kern/{level}/log_amp"]),
    )


def bases_kernel(state: ModelState, level: int) -> kernels.BasesKernel:
    return kernels.BasesKernel(
        kernels.RbfKernel(
            state.params[f"bases_kern/{level}/log_ls"],
            float(state.params[f"bases_kern/{level}/log_amp"]),
        )
    )


def variational_chols(state: ModelState, level: int):
    """(L, R) lower factors of the q(W^(level)) row/column covariances."""

    def build(raw):
        l = np.tril(raw, -1)
        np.fill_diagonal(l, _softplus(np.diag(raw)))
        return l

    return (
        build(state.params[f"vi/{level}/row_raw"]),
        build(state.params[f"vi/{level}/col_raw"]),
    )


def variational_dist(state: ModelState, level: int) -> matnorm.MatrixGaussian:
    l, r = variational_chols(state, level)
    return matnorm.MatrixGaussian(state.params[f"vi/{level}/mean"], l, r)


def noise_precisions(state: ModelState) -> np.ndarray:
    """Effective precision per level: running product of per-level etas."""
    return np.exp(np.cumsum(state.params["log_eta"]))


def augmented_training_inputs(state: ModelState, data: MultiFidelityDataset, weights):
    """Per-level training inputs, augmented with the given weight samples."""
    xs = [data.xs[0]]
    for i in range(1, data.num_levels):
        xs.append(augment_inputs(data.xs[i], weights[i - 1], data.parent_maps[i]))
    return xs


def joint_log_prob(state: ModelState, data: MultiFidelityDataset, weights) -> float:
    """Exact log joint of data, weights, and hyperparameters.

    ``weights`` is one (N_i, i*K) matrix per level. Sums, per level, the
    matrix-normal prior of W^(i) (conditioned on the previous level through
    input augmentation), the Gaussian observation term at the compounded
    precision, and the Gamma / standard-normal hyperpriors.
    """
    terms = joint_log_prob_terms(state, data, weights)
    return float(sum(terms.values()))


def joint_log_prob_terms(state: ModelState, data: MultiFidelityDataset, weights) -> dict:
    c = state.config
    if len(weights) != c.num_levels:
        raise DimensionMismatch(f"need {c.num_levels} weight matrices, got {len(weights)}")
    weights = [np.atleast_2d(np.asarray(w, np.float64)) for w in weights]
    etas = np.exp(state.params["log_eta"])
    eta_bars = noise_precisions(state)
    xs = augmented_training_inputs(state, data, weights)
    terms = {}
    for i in range(1, c.num_levels + 1):
        w = weights[i - 1]
        n_i, p_i = data.counts[i - 1], i * c.num_bases
        if w.shape != (n_i, p_i):
            raise DimensionMismatch(
                f"level {i} weights have shape {w.shape}, expected ({n_i}, {p_i})"
            )
        kx = kernels.gram(input_kernel(state, i), xs[i - 1], xs[i - 1])
        feats = bases_features(state, i)
        kb = kernels.gram(bases_kernel(state, i), feats, feats)
        prior = matnorm.MatrixGaussian(
            np.zeros((n_i, p_i)),
            numerics.cholesky(kx, jitter=GRAM_JITTER).lower,
            numerics.cholesky(kb, jitter=GRAM_JITTER).lower,
        )
        terms[f"prior/{i}"] = matnorm.log_density(prior, w)
        resid = data.ys[i - 1] - w @ stacked_bases(state, i)
        eta_bar = float(eta_bars[i - 1])
        terms[f"loglik/{i}"] = 0.5 * n_i * c.output_dim * (
            np.log(eta_bar) - LOG_2PI
        ) - 0.5 * eta_bar * float(np.sum(resid * resid))
    gamma = 0.0
    for eta, log_eta in zip(etas, state.params["log_eta"]):
        gamma += (c.alpha - 1.0) * float(log_eta) - float(eta) - math.lgamma(c.alpha)
    terms["gamma"] = gamma
    cp_prior = 0.0
    for i in range(1, c.num_levels + 1):
        for r in range(c.cp_order):
            f = state.params[f"cp/{i}/{r}"]
            cp_prior += -0.5 * float(np.sum(f * f)) - 0.5 * f.size * LOG_2PI
    terms["cp_prior"] = cp_prior
    return terms
