"""Stochastic variational inference for the multi-fidelity model.

The evidence lower bound decomposes, per fidelity level, into an analytic
expected log-likelihood (Gaussian observations integrate in closed form
against the matrix-normal posterior), an analytic entropy, and a stochastic
cross-entropy term in which a reparameterized sample of each level's weight
matrix both enters its own prior density and augments the next level's
inputs. Gamma terms over the per-level noise precisions and standard-normal
terms over the CP factors complete the objective.

The whole bound is assembled as one autodiff graph per step, so a single
reverse pass yields exact gradients of the seed-fixed estimate for every
free parameter. At the first fidelity level the input gram does not depend
on sampled weights, so the expectation of the cross term has a closed form;
``analytic_kl_level1`` swaps it in (useful for oracle checks and variance
reduction).
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import mfmodel, numerics
from .errors import Diverged, InvalidStepSize, TooManyParameters
from .mfmodel import GRAM_JITTER, LOG_2PI, ModelState, MultiFidelityDataset


@dataclass
class TrainConfig:
    epochs: int = 5000
    learning_rate: float = 1e-3
    mc_samples_per_step: int = 1
    seed: int = 0
    gradient_clip: float = None
    log_every: int = 100
    analytic_kl_level1: bool = False


@dataclass
class ElboEstimate:
    """Scalar bound value plus its named additive terms (they sum to value)."""

    value: float
    breakdown: dict
    seed: int = None


@dataclass
class TraceRecord:
    step: int
    elbo: float
    train_rmse: tuple
    seconds: float


@dataclass
class GradientCheckEntry:
    name: str
    analytic_norm: float
    fd_norm: float
    rel_error: float
    passed: bool


@dataclass
class GradientCheckReport:
    entries: list
    passed: bool
    num_parameters: int
    step_size: float

    def format_table(self) -> str:
        lines = [f"{'parameter':<24} {'|analytic|':>12} {'|fd|':>12} {'rel err':>10}  status"]
        for e in self.entries:
            lines.append(
                f"{e.name:<24} {e.analytic_norm:>12.4e} {e.fd_norm:>12.4e} "
                f"{e.rel_error:>10.2e}  {'ok' if e.passed else 'FAIL'}"
            )
        return "\n".join(lines)


def _expand_blocks_graph(leaves, config):
    """CP factor leaves -> dense (K, d) block Vars per level, on tape."""
    blocks = []
    k = config.num_bases
    for i in range(1, config.num_levels + 1):
        acc = leaves[f"cp/{i}/0"]
        width = acc.shape[1]
        for r in range(1, config.cp_order):
            f = leaves[f"cp/{i}/{r}"]
            m = f.shape[1]
            acc = ad.reshape(
                ad.mul(ad.reshape(acc, (k, width, 1)), ad.reshape(f, (k, 1, m))),
                (k, width * m),
            )
            width *= m
        if width > config.output_dim:
            acc = ad.narrow(acc, 1, 0, config.output_dim)
        blocks.append(acc)
    return blocks


def build_elbo_graph(
    state: ModelState,
    data: MultiFidelityDataset,
    rng: numerics.RngStream,
    analytic_kl_level1: bool = False,
    mc_samples: int = 1,
):
    """Assemble the bound; returns (value Var, breakdown of term Vars, leaves)."""
    c = state.config
    d = c.output_dim
    leaves = {name: ad.Var(arr) for name, arr in state.params.items()}
    blocks = _expand_blocks_graph(leaves, c)
    b_full = ad.concat(blocks, axis=0)
    feats_full = ad.concat(
        [
            ad.concat([leaves[f"cp/{i}/{r}"] for r in range(c.cp_order)], axis=1)
            for i in range(1, c.num_levels + 1)
        ],
        axis=0,
    )
    log_eta = leaves["log_eta"]

    breakdown = {}
    level_cache = []
    for i in range(1, c.num_levels + 1):
        n_i, p_i = c.level_counts[i - 1], i * c.num_bases
        mean = leaves[f"vi/{i}/mean"]
        lrow = ad.tril_with_softplus_diag(leaves[f"vi/{i}/row_raw"])
        lcol = ad.tril_with_softplus_diag(leaves[f"vi/{i}/col_raw"])
        b_i = ad.narrow(b_full, 0, 0, p_i) if p_i < b_full.shape[0] else b_full
        log_eta_bar = ad.sum_(ad.narrow(log_eta, 0, 0, i))
        eta_bar = ad.exp(log_eta_bar)

        resid2 = ad.frob2(ad.sub(data.ys[i - 1], ad.matmul(mean, b_i)))
        tr_sigma = ad.frob2(lrow)
        tr_obb = ad.frob2(ad.matmul(ad.transpose(b_i), lcol))
        loglik = ad.sub(
            ad.mul(ad.sub(log_eta_bar, LOG_2PI), 0.5 * n_i * d),
            ad.mul(ad.mul(eta_bar, ad.add(resid2, ad.mul(tr_sigma, tr_obb))), 0.5),
        )
        breakdown[f"loglik/{i}"] = loglik

        entropy = ad.add(
            ad.add(
                ad.mul(ad.sum_(ad.log(ad.diag_part(lrow))), float(p_i)),
                ad.mul(ad.sum_(ad.log(ad.diag_part(lcol))), float(n_i)),
            ),
            0.5 * n_i * p_i * (1.0 + LOG_2PI),
        )
        breakdown[f"entropy/{i}"] = entropy
        level_cache.append((mean, lrow, lcol, b_i))

    prior_acc = {i: None for i in range(1, c.num_levels + 1)}
    for _ in range(mc_samples):
        w_prev = None
        for i in range(1, c.num_levels + 1):
            n_i, p_i = c.level_counts[i - 1], i * c.num_bases
            mean, lrow, lcol, _ = level_cache[i - 1]
            z = rng.standard_normal(n_i, p_i)
            w_tilde = ad.add(mean, ad.matmul(ad.matmul(lrow, z), ad.transpose(lcol)))
            if i == 1:
                xhat = ad.constant(data.xs[0])
            else:
                xhat = ad.concat(
                    [
                        ad.constant(data.xs[i - 1]),
                        ad.gather_rows(w_prev, data.parent_maps[i - 1]),
                    ],
                    axis=1,
                )
            kx = ad.rbf_gram(
                xhat,
                xhat,
                leaves[f"input_kern/{i}/log_ls"],
                leaves[f"input_kern/{i}/log_amp"],
            )
            lx = ad.cholesky(kx, jitter=GRAM_JITTER)
            vf = (
                ad.narrow(feats_full, 0, 0, p_i)
                if p_i < feats_full.shape[0]
                else feats_full
            )
            kb = ad.rbf_gram(
                vf,
                vf,
                leaves[f"bases_kern/{i}/log_ls"],
                leaves[f"bases_kern/{i}/log_amp"],
            )
            lb = ad.cholesky(kb, jitter=GRAM_JITTER)
            ld_x = ad.logdet_from_chol(lx)
            ld_b = ad.logdet_from_chol(lb)
            if i == 1 and analytic_kl_level1:
                # E[tr(Kb^{-1} W^T Kx^{-1} W)] in closed form under q.
                s1 = ad.solve_lower(lx, mean)
                quad_m = ad.frob2(ad.solve_lower(lb, ad.transpose(s1)))
                tr_ks = ad.frob2(ad.solve_lower(lx, lrow))
                tr_bo = ad.frob2(ad.solve_lower(lb, lcol))
                cross = ad.add(quad_m, ad.mul(tr_ks, tr_bo))
            else:
                s1 = ad.solve_lower(lx, w_tilde)
                cross = ad.frob2(ad.solve_lower(lb, ad.transpose(s1)))
            prior = ad.sub(
                ad.mul(
                    ad.add(
                        ad.add(ad.mul(ld_x, float(p_i)), ad.mul(ld_b, float(n_i))),
                        cross,
                    ),
                    -0.5,
                ),
                0.5 * n_i * p_i * LOG_2PI,
            )
            prior_acc[i] = prior if prior_acc[i] is None else ad.add(prior_acc[i], prior)
            w_prev = w_tilde
    for i in range(1, c.num_levels + 1):
        breakdown[f"prior/{i}"] = ad.mul(prior_acc[i], 1.0 / mc_samples)

    alpha = c.alpha
    gamma = ad.sub(
        ad.mul(ad.sum_(log_eta), alpha - 1.0), ad.sum_(ad.exp(log_eta))
    )
    breakdown["gamma"] = ad.add(gamma, -c.num_levels * math.lgamma(alpha))

    cp_prior = None
    n_cp = 0
    for i in range(1, c.num_levels + 1):
        for r in range(c.cp_order):
            f = leaves[f"cp/{i}/{r}"]
            n_cp += f.value.size
            term = ad.mul(ad.frob2(f), -0.5)
            cp_prior = term if cp_prior is None else ad.add(cp_prior, term)
    breakdown["cp_prior"] = ad.add(cp_prior, -0.5 * n_cp * LOG_2PI)

    value = None
    for term in breakdown.values():
        value = term if value is None else ad.add(value, term)
    return value, breakdown, leaves


def estimate_elbo(
    state: ModelState,
    data: MultiFidelityDataset,
    rng: numerics.RngStream,
    analytic_kl_level1: bool = False,
    mc_samples: int = 1,
) -> ElboEstimate:
    """Seed-fixed stochastic estimate of the bound (forward pass only)."""
    value, breakdown, _ = build_elbo_graph(
        state, data, rng, analytic_kl_level1, mc_samples
    )
    return ElboEstimate(
        value.item(), {k: v.item() for k, v in breakdown.items()}, rng.seed
    )


def elbo_gradient(
    state: ModelState,
    data: MultiFidelityDataset,
    seed: int,
    analytic_kl_level1: bool = False,
    mc_samples: int = 1,
) -> dict:
    """Exact gradient of the seed-fixed bound for every free parameter.

    Differentiates the same estimate that ``estimate_elbo`` returns when
    given ``RngStream(seed)``.
    """
    grads, _ = _value_and_grad(
        state, data, numerics.RngStream(seed), analytic_kl_level1, mc_samples
    )
    return grads


def _value_and_grad(state, data, rng, analytic_kl_level1=False, mc_samples=1):
    value, _, leaves = build_elbo_graph(
        state, data, rng, analytic_kl_level1, mc_samples
    )
    ad.backward(value)
    grads = {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
        for name, leaf in leaves.items()
    }
    return grads, value.item()


def train_rmse(state: ModelState, data: MultiFidelityDataset) -> tuple:
    """Per-level RMSE of the posterior-mean reconstruction of the training outputs."""
    out = []
    for i in range(1, state.config.num_levels + 1):
        recon = state.params[f"vi/{i}/mean"] @ mfmodel.stacked_bases(state, i)
        out.append(float(np.sqrt(np.mean((data.ys[i - 1] - recon) ** 2))))
    return tuple(out)


def fit(state: ModelState, data: MultiFidelityDataset, config: TrainConfig):
    """Adam ascent on the stochastic bound.

    Returns ``(trained_state, trace)``. Every step draws its own child
    stream of ``config.seed``, so runs replay bit-exactly. A non-finite
    bound raises :class:`Diverged` carrying the last finite state.
    """
    data.validate()
    state = state.copy()
    root = numerics.RngStream(config.seed)
    names = sorted(state.params)
    m = {n: np.zeros_like(state.params[n]) for n in names}
    v = {n: np.zeros_like(state.params[n]) for n in names}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    trace = []
    started = time.perf_counter()
    last_good = state.copy()
    for step in range(config.epochs):
        grads, value = _value_and_grad(
            state,
            data,
            root.child(step),
            config.analytic_kl_level1,
            config.mc_samples_per_step,
        )
        if not np.isfinite(value) or any(
            not np.all(np.isfinite(g)) for g in grads.values()
        ):
            raise Diverged(
                f"non-finite bound at step {step}", step=step, last_state=last_good
            )
        last_good = state.copy()
        if config.gradient_clip is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > config.gradient_clip:
                scale = config.gradient_clip / norm
                grads = {n: g * scale for n, g in grads.items()}
        t = step + 1
        corr1 = 1.0 - beta1**t
        corr2 = 1.0 - beta2**t
        for n in names:
            g = grads[n]
            m[n] = beta1 * m[n] + (1 - beta1) * g
            v[n] = beta2 * v[n] + (1 - beta2) * g * g
            state.params[n] = state.params[n] + config.learning_rate * (
                m[n] / corr1
            ) / (np.sqrt(v[n] / corr2) + eps)
        if step % config.log_every == 0 or step == config.epochs - 1:
            trace.append(
                TraceRecord(
                    step,
                    value,
                    train_rmse(state, data),
                    time.perf_counter() - started,
                )
            )
    state.trained = True
    return state, trace


def check_gradients(
    state: ModelState,
    data: MultiFidelityDataset,
    seed: int = 0,
    step_size: float = 1e-5,
    rel_tol: float = 1e-3,
    max_parameters: int = 5000,
    norm_floor: float = 1e-4,
) -> GradientCheckReport:
    """Central-difference validation of the reverse-mode gradient.

    Perturbs every scalar entry of every parameter, so it refuses models
    with more than ``max_parameters`` scalars. The per-parameter relative
    error compares full gradient arrays in the Frobenius norm; the
    denominator is floored at ``norm_floor`` because central differences
    carry an absolute cancellation noise of order eps*|objective|/h, so a
    parameter whose true gradient norm sits below the floor can only be
    verified absolutely, never relatively.
    """
    if step_size <= 0:
        raise InvalidStepSize(f"step size must be positive, got {step_size}")
    total = sum(p.size for p in state.params.values())
    if total > max_parameters:
        raise TooManyParameters(
            f"{total} scalars exceed the check limit of {max_parameters}"
        )
    analytic = elbo_gradient(state, data, seed)

    def value_at(params):
        probe = ModelState(state.config, params, state.trained)
        return estimate_elbo(probe, data, numerics.RngStream(seed)).value

    entries = []
    for name in sorted(state.params):
        base = state.params[name]
        fd = np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            plus = {k: (p.copy() if k == name else p) for k, p in state.params.items()}
            minus = {k: (p.copy() if k == name else p) for k, p in state.params.items()}
            plus[name][idx] += step_size
            minus[name][idx] -= step_size
            fd[idx] = (value_at(plus) - value_at(minus)) / (2 * step_size)
            it.iternext()
        a_norm = float(np.linalg.norm(analytic[name]))
        f_norm = float(np.linalg.norm(fd))
        rel = float(np.linalg.norm(analytic[name] - fd)) / max(
            a_norm, f_norm, norm_floor
        )
        entries.append(
            GradientCheckEntry(name, a_norm, f_norm, rel, rel < rel_tol)
        )
    return GradientCheckReport(
        entries, all(e.passed for e in entries), total, step_size
    )
