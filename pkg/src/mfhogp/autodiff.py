"""Reverse-mode automatic differentiation over numpy arrays.

A deliberately small tape: each :class:`Var` wraps a float64 ndarray and a
closure that scatters the upstream gradient to its parents. The op set is
exactly what the variational objective needs -- broadcasting arithmetic,
matmul, reductions, reshaping/concatenation/gather, elementwise transcendental
functions, and the two structured linear-algebra ops (Cholesky, triangular
solve) with their matrix adjoints. Graphs are rebuilt every step; ``backward``
walks the graph once in reverse topological order.

Plain ndarrays (or python floats) mixed into any op are treated as constants
and receive no gradient.
"""

import numpy as np
from scipy.linalg import solve_triangular as _tri_solve
from scipy.special import expit as _sigmoid

from . import numerics
from .errors import DimensionMismatch


class Var:
    """Graph node: a value, an accumulated gradient, and a backward closure."""

    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(p for p in parents if isinstance(p, Var))
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.value)

    # arithmetic sugar; every route funnels into the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _accum(var, g):
    if isinstance(var, Var):
        var.grad = g if var.grad is None else var.grad + g


def _unbroadcast(g, shape):
    """Sum ``g`` back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def constant(value) -> Var:
    return Var(value)


def add(a, b) -> Var:
    av, bv = _val(a), _val(b)
    out = Var(av + bv, (a, b))

    def bw(g):
        _accum(a, _unbroadcast(g, av.shape))
        _accum(b, _unbroadcast(g, bv.shape))

    out.backward_fn = bw
    return out


def sub(a, b) -> Var:
    av, bv = _val(a), _val(b)
    out = Var(av - bv, (a, b))

    def bw(g):
        _accum(a, _unbroadcast(g, av.shape))
        _accum(b, _unbroadcast(-g, bv.shape))

    out.backward_fn = bw
    return out


def mul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    out = Var(av * bv, (a, b))

    def bw(g):
        _accum(a, _unbroadcast(g * bv, av.shape))
        _accum(b, _unbroadcast(g * av, bv.shape))

    out.backward_fn = bw
    return out


def matmul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise DimensionMismatch("matmul is 2-D only")
    out = Var(av @ bv, (a, b))

    def bw(g):
        _accum(a, g @ bv.T)
        _accum(b, av.T @ g)

    out.backward_fn = bw
    return out


def transpose(a) -> Var:
    av = _val(a)
    out = Var(av.T, (a,))

    def bw(g):
        _accum(a, g.T)

    out.backward_fn = bw
    return out


def exp(a) -> Var:
    av = _val(a)
    ev = np.exp(av)
    out = Var(ev, (a,))

    def bw(g):
        _accum(a, g * ev)

    out.backward_fn = bw
    return out


def log(a) -> Var:
    av = _val(a)
    out = Var(np.log(av), (a,))

    def bw(g):
        _accum(a, g / av)

    out.backward_fn = bw
    return out


def softplus(a) -> Var:
    av = _val(a)
    out = Var(np.logaddexp(0.0, av), (a,))

    def bw(g):
        _accum(a, g * _sigmoid(av))

    out.backward_fn = bw
    return out


def sum_(a, axis=None, keepdims=False) -> Var:
    av = _val(a)
    out = Var(av.sum(axis=axis, keepdims=keepdims), (a,))

    def bw(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, av.shape).copy())

    out.backward_fn = bw
    return out


def reshape(a, shape) -> Var:
    av = _val(a)
    out = Var(av.reshape(shape), (a,))

    def bw(g):
        _accum(a, g.reshape(av.shape))

    out.backward_fn = bw
    return out


def concat(parts, axis=0) -> Var:
    vals = [_val(p) for p in parts]
    out = Var(np.concatenate(vals, axis=axis), tuple(parts))
    sizes = [v.shape[axis] for v in vals]

    def bw(g):
        start = 0
        for p, size in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + size)
            _accum(p, g[tuple(sl)])
            start += size

    out.backward_fn = bw
    return out


def gather_rows(a, index) -> Var:
    av = _val(a)
    idx = np.asarray(index, dtype=np.intp)
    out = Var(av[idx], (a,))

    def bw(g):
        acc = np.zeros_like(av)
        np.add.at(acc, idx, g)
        _accum(a, acc)

    out.backward_fn = bw
    return out


def narrow(a, axis, start, length) -> Var:
    """Contiguous slice [start, start+length) along ``axis``."""
    av = _val(a)
    sl = [slice(None)] * av.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Var(av[sl], (a,))

    def bw(g):
        acc = np.zeros_like(av)
        acc[sl] = g
        _accum(a, acc)

    out.backward_fn = bw
    return out


def diag_part(a) -> Var:
    av = _val(a)
    out = Var(np.diag(av).copy(), (a,))

    def bw(g):
        acc = np.zeros_like(av)
        np.fill_diagonal(acc, g)
        _accum(a, acc)

    out.backward_fn = bw
    return out


def diag_embed(v) -> Var:
    vv = _val(v)
    out = Var(np.diag(vv), (v,))

    def bw(g):
        _accum(v, np.diag(g).copy())

    out.backward_fn = bw
    return out


def cholesky(a, jitter=1e-8) -> Var:
    """Lower Cholesky factor of a symmetric PSD Var, with jitter escalation.

    The input is symmetrized before factoring; the adjoint treats the input
    as the symmetric matrix it represents (gradient split evenly across the
    off-diagonal pair), following the standard lower-triangular Cholesky
    pushforward/pullback identities.
    """
    av = _val(a)
    fac = numerics.cholesky(av, jitter=jitter)
    lval = fac.lower
    out = Var(lval, (a,))

    def bw(g):
        gl = np.tril(g)
        p = lval.T @ gl
        phi = np.tril(p, -1) + 0.5 * np.diag(np.diag(p))
        s = phi + phi.T
        # G = 0.5 * L^{-T} (phi + phi^T) L^{-1}
        t1 = _tri_solve(lval, s, lower=True, trans="T")
        t2 = _tri_solve(lval, t1.T, lower=True, trans="T").T
        _accum(a, 0.5 * t2)

    out.backward_fn = bw
    return out


def solve_lower(l, b, transpose_l=False) -> Var:
    """x solving L x = b (or L^T x = b) for lower-triangular L."""
    lv, bv = _val(l), _val(b)
    xv = _tri_solve(lv, bv, lower=True, trans="T" if transpose_l else "N")
    out = Var(xv, (l, b))

    def bw(g):
        if not transpose_l:
            gb = _tri_solve(lv, g, lower=True, trans="T")
            gl = -gb @ xv.T
        else:
            gb = _tri_solve(lv, g, lower=True, trans="N")
            gl = -xv @ gb.T
        _accum(b, gb)
        _accum(l, np.tril(gl))

    out.backward_fn = bw
    return out


def backward(root: Var) -> None:
    """Accumulate d(root)/d(node) into every reachable node's ``grad``."""
    if root.value.ndim != 0:
        raise DimensionMismatch("backward needs a scalar root")
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones(())
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


# composite helpers built from the primitives above


def frob2(a) -> Var:
    """Squared Frobenius norm."""
    return sum_(mul(a, a))


def logdet_from_chol(l) -> Var:
    return 2.0 * sum_(log(diag_part(l)))


def tril_with_softplus_diag(raw) -> Var:
    """Lower-triangular matrix with strictly positive (softplus) diagonal."""
    rv = _val(raw)
    mask = np.tril(np.ones_like(rv), -1)
    return add(mul(raw, mask), diag_embed(softplus(diag_part(raw))))


def rbf_gram(xa, xb, log_lengthscales, log_amplitude) -> Var:
    """Differentiable ARD RBF gram; all four arguments may carry gradients."""
    inv = exp(mul(log_lengthscales, -1.0))
    asc = mul(xa, inv)
    bsc = asc if xb is xa else mul(xb, inv)
    arow = sum_(mul(asc, asc), axis=1, keepdims=True)
    brow = arow if xb is xa else sum_(mul(bsc, bsc), axis=1, keepdims=True)
    q = add(arow, transpose(brow))
    q = sub(q, mul(matmul(asc, transpose(bsc)), 2.0))
    return exp(sub(log_amplitude, mul(q, 0.5)))
