"""Reverse-mode automatic differentiation on an append-only tape.

Values are float64: plain Python floats for rank-0 and numpy arrays for
rank 1-2.  Nodes are recorded in creation order, which is already a
topological order, so the backward pass is a single reverse sweep.  Besides
the elementwise / linear-algebra primitives there are fused ops (LSTM cell,
dense layers, the gap/count log-likelihoods, Gaussian KL) whose forward and
backward kernels live in :mod:`churnkit._kernels`; fusing them keeps the
per-step node count, and therefore the Python overhead of long unrolls, low.

Broadcasting is deliberately limited to scalar-with-tensor; everything else
must match shapes exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import NumericalError

_WT_ZERO_EPS = 1e-8  # below this |w_t| the intensity slope is treated as 0


def _coerce(value):
    if isinstance(value, (float, int)):
        return float(value)
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return float(arr)
    if arr.ndim > 2:
        raise ValueError(f"rank {arr.ndim} value not supported (max rank 2)")
    return arr


def _shape(value):
    return () if isinstance(value, float) else value.shape


class Node:
    """One tape entry: op kind, parents, cached value, adjoint slot."""

    __slots__ = ("tape", "idx", "op", "parents", "value", "aux", "bwd", "adjoint")

    def __init__(self, tape, idx, op, parents, value, aux, bwd):
        self.tape = tape
        self.idx = idx
        self.op = op
        self.parents = parents
        self.value = value
        self.aux = aux
        self.bwd = bwd
        self.adjoint = None

    @property
    def shape(self):
        return _shape(self.value)

    def __repr__(self):
        return f"Node({self.idx}, {self.op}, shape={self.shape})"

    def _lift(self, other):
        if isinstance(other, Node):
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __neg__(self):
        return negate(self)


class Tape:
    """Append-only op record; owns its nodes and the set of parameter leaves."""

    __slots__ = ("nodes", "params")

    def __init__(self):
        self.nodes = []
        self.params = []

    def _push(self, value, parents, bwd, aux=None, op=""):
        node = Node(self, len(self.nodes), op, parents, value, aux, bwd)
        self.nodes.append(node)
        return node

    def const(self, value):
        return self._push(_coerce(value), (), None, op="const")

    def param(self, value):
        node = self._push(_coerce(value), (), None, op="param")
        self.params.append(node)
        return node

    def __len__(self):
        return len(self.nodes)


def _acc(node, grad):
    """Accumulate into a parent's adjoint, summing over scalar broadcast."""
    if isinstance(node.value, float) and not isinstance(grad, float):
        grad = float(grad.sum())
    if node.adjoint is None:
        node.adjoint = grad
    else:
        node.adjoint = node.adjoint + grad


def _same_or_scalar(op, a, b):
    sa, sb = _shape(a.value), _shape(b.value)
    if sa != sb and sa != () and sb != ():
        raise ValueError(f"{op}: shape mismatch {sa} vs {sb}")


# ---------------------------------------------------------------- primitives


def _bwd_add(n):
    # hand distinct array objects to the two parents: a leaf's adjoint buffer
    # may later be accumulated into in place by the fused step backward
    a, b = n.parents
    g = n.adjoint
    _acc(a, g)
    _acc(b, g.copy() if isinstance(g, np.ndarray) else g)


def add(a, b):
    _same_or_scalar("add", a, b)
    return a.tape._push(a.value + b.value, (a, b), _bwd_add, op="add")


def _bwd_sub(n):
    a, b = n.parents
    _acc(a, n.adjoint)
    _acc(b, -n.adjoint)


def sub(a, b):
    _same_or_scalar("sub", a, b)
    return a.tape._push(a.value - b.value, (a, b), _bwd_sub, op="sub")


def _bwd_mul(n):
    a, b = n.parents
    _acc(a, n.adjoint * b.value)
    _acc(b, n.adjoint * a.value)


def mul(a, b):
    _same_or_scalar("mul", a, b)
    return a.tape._push(a.value * b.value, (a, b), _bwd_mul, op="mul")


def _bwd_negate(n):
    _acc(n.parents[0], -n.adjoint)


def negate(a):
    return a.tape._push(-a.value, (a,), _bwd_negate, op="negate")


def _bwd_exp(n):
    _acc(n.parents[0], n.adjoint * n.value)


def exp(a):
    v = a.value
    if isinstance(v, float):
        if v > 700.0:
            raise NumericalError(f"exp: overflow, argument {v:.3g} > 700")
        out = math.exp(v)
    else:
        if np.any(v > 700.0):
            raise NumericalError("exp: overflow, argument > 700")
        out = np.exp(v)
    return a.tape._push(out, (a,), _bwd_exp, op="exp")


def _bwd_log(n):
    _acc(n.parents[0], n.adjoint / n.parents[0].value)


def log(a):
    v = a.value
    bad = v <= 0.0 if isinstance(v, float) else np.any(v <= 0.0)
    if bad:
        raise NumericalError("log: non-positive argument")
    out = math.log(v) if isinstance(v, float) else np.log(v)
    return a.tape._push(out, (a,), _bwd_log, op="log")


def _bwd_tanh(n):
    _acc(n.parents[0], n.adjoint * (1.0 - n.value * n.value))


def tanh(a):
    v = a.value
    out = math.tanh(v) if isinstance(v, float) else np.tanh(v)
    return a.tape._push(out, (a,), _bwd_tanh, op="tanh")


def _sigmoid_scalar(v):
    if v >= 0.0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def _bwd_sigmoid(n):
    _acc(n.parents[0], n.adjoint * n.value * (1.0 - n.value))


def sigmoid(a):
    v = a.value
    out = _sigmoid_scalar(v) if isinstance(v, float) else K.sigmoid(v)
    return a.tape._push(out, (a,), _bwd_sigmoid, op="sigmoid")


def _softplus_val(v):
    if isinstance(v, float):
        return max(v, 0.0) + math.log1p(math.exp(-abs(v)))
    return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))


def _bwd_softplus(n):
    v = n.parents[0].value
    s = _sigmoid_scalar(v) if isinstance(v, float) else K.sigmoid(v)
    _acc(n.parents[0], n.adjoint * s)


def softplus(a):
    return a.tape._push(_softplus_val(a.value), (a,), _bwd_softplus, op="softplus")


def softplus_floor(a, floor):
    """softplus(a) + floor, the positivity map used for scale parameters."""
    node = a.tape._push(_softplus_val(a.value) + floor, (a,), _bwd_softplus, op="softplus_floor")
    return node


def _bwd_sum(n):
    p = n.parents[0]
    _acc(p, np.full(p.value.shape, n.adjoint))


def vsum(a):
    if isinstance(a.value, float):
        raise ValueError("sum: argument is already a scalar")
    return a.tape._push(float(a.value.sum()), (a,), _bwd_sum, op="sum")


def _bwd_dot(n):
    a, b = n.parents
    _acc(a, n.adjoint * b.value)
    _acc(b, n.adjoint * a.value)


def dot(a, b):
    if _shape(a.value) != _shape(b.value) or isinstance(a.value, float):
        raise ValueError(f"dot: need equal vector shapes, got {_shape(a.value)} vs {_shape(b.value)}")
    return a.tape._push(float(a.value @ b.value), (a, b), _bwd_dot, op="dot")


def _bwd_matvec(n):
    m, v = n.parents
    _acc(m, np.outer(n.adjoint, v.value))
    _acc(v, m.value.T @ n.adjoint)


def matvec(m, v):
    sm, sv = _shape(m.value), _shape(v.value)
    if len(sm) != 2 or len(sv) != 1 or sm[1] != sv[0]:
        raise ValueError(f"matvec: shape mismatch {sm} @ {sv}")
    return m.tape._push(m.value @ v.value, (m, v), _bwd_matvec, op="matvec")


def _bwd_matmul(n):
    a, b = n.parents
    _acc(a, n.adjoint @ b.value.T)
    _acc(b, a.value.T @ n.adjoint)


def matmul(a, b):
    sa, sb = _shape(a.value), _shape(b.value)
    if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
        raise ValueError(f"matmul: shape mismatch {sa} @ {sb}")
    return a.tape._push(a.value @ b.value, (a, b), _bwd_matmul, op="matmul")


def _bwd_concat(n):
    offsets = n.aux
    for p, start, stop in zip(n.parents, offsets[:-1], offsets[1:]):
        chunk = n.adjoint[start:stop]
        _acc(p, float(chunk[0]) if isinstance(p.value, float) else chunk)


def concat(*parts):
    vals = []
    offsets = [0]
    for p in parts:
        v = p.value
        if isinstance(v, float):
            vals.append(np.array([v]))
        elif v.ndim == 1:
            vals.append(v)
        else:
            raise ValueError(f"concat: rank-2 part of shape {v.shape}")
        offsets.append(offsets[-1] + vals[-1].shape[0])
    out = np.concatenate(vals)
    return parts[0].tape._push(out, tuple(parts), _bwd_concat, aux=offsets, op="concat")


def _bwd_index(n):
    p = n.parents[0]
    g = np.zeros(p.value.shape)
    g[n.aux] = n.adjoint
    _acc(p, g)


def index(a, i):
    if isinstance(a.value, float) or a.value.ndim != 1:
        raise ValueError(f"index: need a vector, got shape {_shape(a.value)}")
    return a.tape._push(float(a.value[i]), (a,), _bwd_index, aux=i, op="index")


def _bwd_row(n):
    p = n.parents[0]
    g = np.zeros(p.value.shape)
    g[n.aux] = n.adjoint
    _acc(p, g)


def row(a, r):
    if isinstance(a.value, float) or a.value.ndim != 2:
        raise ValueError(f"row: need a matrix, got shape {_shape(a.value)}")
    return a.tape._push(a.value[r].copy(), (a,), _bwd_row, aux=r, op="row")


def _bwd_add_n(n):
    g = n.adjoint
    shared = isinstance(g, np.ndarray)
    for i, p in enumerate(n.parents):
        _acc(p, g.copy() if shared and i else g)


def add_n(terms):
    """Sum of scalar nodes; one node regardless of how many terms."""
    total = 0.0
    for t in terms:
        total += t.value
    return terms[0].tape._push(total, tuple(terms), _bwd_add_n, op="add_n")


# ----------------------------------------------------------------- fused ops


def _bwd_dense_tanh(n):
    x, W, b = n.parents
    dW, dx, db = K.dense_tanh_bwd(W.value, x.value, n.value, n.adjoint)
    _acc(x, dx)
    _acc(W, dW)
    _acc(b, db)


def dense_tanh(x, W, b):
    """tanh(W @ x + b) as a single fused node."""
    sm, sv = _shape(W.value), _shape(x.value)
    if len(sm) != 2 or sm[1] != sv[0] or _shape(b.value) != (sm[0],):
        raise ValueError(f"dense_tanh: shape mismatch {sm} @ {sv} + {_shape(b.value)}")
    out = K.dense_tanh_fwd(W.value, x.value, b.value)
    return x.tape._push(out, (x, W, b), _bwd_dense_tanh, op="dense_tanh")


def _bwd_affine(n):
    x, W, b = n.parents
    dW, dx = K.affine_bwd(W.value, x.value, n.adjoint)
    _acc(x, dx)
    _acc(W, dW)
    _acc(b, n.adjoint)


def affine(x, W, b):
    sm, sv = _shape(W.value), _shape(x.value)
    if len(sm) != 2 or sm[1] != sv[0] or _shape(b.value) != (sm[0],):
        raise ValueError(f"affine: shape mismatch {sm} @ {sv} + {_shape(b.value)}")
    out = K.affine_fwd(W.value, x.value, b.value)
    return x.tape._push(out, (x, W, b), _bwd_affine, op="affine")


def _bwd_lstm_cell(n):
    z, state, W, b = n.parents
    gates, xh = n.aux
    dstate, dz, dW, db = K.lstm_bwd(state.value, W.value, gates, xh, n.value, n.adjoint)
    _acc(z, dz)
    _acc(state, dstate)
    _acc(W, dW)
    _acc(b, db)


def lstm_cell(z, state, W, b, g_feat, d_feat):
    """One LSTM step; input is [g_feat, d_feat, z], state rows are (h, c)."""
    H = state.value.shape[1]
    if _shape(W.value) != (4 * H, 3 + H) or _shape(b.value) != (4 * H,):
        raise ValueError(
            f"lstm_cell: weight shape {_shape(W.value)} does not fit state {state.value.shape}"
        )
    out, gates, xh = K.lstm_fwd(state.value, z.value, g_feat, d_feat, W.value, b.value)
    return z.tape._push(out, (z, state, W, b), _bwd_lstm_cell, aux=(gates, xh), op="lstm_cell")


def _bwd_reparam_sigmoid(n):
    m, s = n.parents
    g = n.adjoint * n.value * (1.0 - n.value)
    _acc(m, g)
    _acc(s, g * n.aux)


_Z_LO = 1e-15
_Z_HI = float(np.nextafter(1.0, 0.0))


def reparam_sigmoid(mu, sigma, eps):
    """z = sigmoid(mu + sigma * eps) with eps a fixed standard-normal draw.

    The output is clamped to the open interval (0, 1); at the clamp the
    derivative z(1-z) is already ~0 so the gradient stays consistent.
    """
    z = _sigmoid_scalar(mu.value + sigma.value * eps)
    z = min(max(z, _Z_LO), _Z_HI)
    return mu.tape._push(z, (mu, sigma), _bwd_reparam_sigmoid, aux=eps, op="reparam_sigmoid")


def _bwd_zh_affine(n):
    z, h, wz, wh, b = n.parents
    g = n.adjoint
    _acc(z, g * wz.value)
    _acc(h, g * wh.value)
    _acc(wz, g * z.value)
    _acc(wh, g * h.value)
    _acc(b, g)


def zh_affine(z, h, wz, wh, b):
    """wz*z + wh.h + b — the scalar head feeding intensity / count rate."""
    if _shape(wh.value) != _shape(h.value):
        raise ValueError(f"zh_affine: shape mismatch {_shape(wh.value)} vs {_shape(h.value)}")
    val = wz.value * z.value + float(wh.value @ h.value) + b.value
    if not math.isfinite(val):
        raise NumericalError("zh_affine: non-finite head value")
    return z.tape._push(val, (z, h, wz, wh, b), _bwd_zh_affine, op="zh_affine")


def _bwd_gaussian_kl(n):
    mq, sq, mp, sp = n.parents
    dm = (mq.value - mp.value) / (sp.value * sp.value)
    g = n.adjoint
    _acc(mq, g * dm)
    _acc(mp, -g * dm)
    _acc(sq, g * (sq.value / (sp.value * sp.value) - 1.0 / sq.value))
    _acc(
        sp,
        g
        * (
            1.0 / sp.value
            - (sq.value * sq.value + (mq.value - mp.value) ** 2) / sp.value**3
        ),
    )


def gaussian_kl(mu_q, sigma_q, mu_p, sigma_p):
    """KL between two univariate Gaussians, KL(q || p), as one node."""
    sq, sp = sigma_q.value, sigma_p.value
    if sq <= 0.0 or sp <= 0.0:
        raise NumericalError(f"gaussian_kl: non-positive std ({sq:.3g}, {sp:.3g})")
    d = mu_q.value - mu_p.value
    val = math.log(sp / sq) + (sq * sq + d * d) / (2.0 * sp * sp) - 0.5
    if not math.isfinite(val):
        raise NumericalError("gaussian_kl: non-finite value")
    return mu_q.tape._push(
        val, (mu_q, sigma_q, mu_p, sigma_p), _bwd_gaussian_kl, op="gaussian_kl"
    )


def _gap_loglik_parts(a, wt, g):
    """Returns (value, dval/da, dval/dwt) of the next-gap log density."""
    if a > 700.0:
        raise NumericalError(f"gap_loglik: exp overflow, base {a:.3g} > 700")
    ea = math.exp(a)
    if abs(wt) < _WT_ZERO_EPS:
        lam_int = ea * g
        dwt = g - ea * g * g / 2.0
        val = a - lam_int
    else:
        x = wt * g
        if x > 700.0:
            raise NumericalError("gap_loglik: exp overflow in cumulative intensity")
        lam_int = ea * math.expm1(x) / wt
        if abs(x) < 1e-3:
            # series for (d/dwt)[(e^x - 1)/wt]; avoids cancellation near 0
            D = g * g * (0.5 + x / 3.0 + x * x / 8.0 + x**3 / 30.0)
        else:
            D = (math.exp(x) * (x - 1.0) + 1.0) / (wt * wt)
        dwt = g - ea * D
        val = a + x - lam_int
    if not math.isfinite(val):
        raise NumericalError("gap_loglik: non-finite log density")
    return val, 1.0 - lam_int, dwt


def _bwd_gap_loglik(n):
    a, wt = n.parents
    da, dwt = n.aux
    _acc(a, n.adjoint * da)
    _acc(wt, n.adjoint * dwt)


def gap_loglik(a, wt, g):
    """log f*(g) = a + wt*g - integral of exp(a + wt*s) over [0, g]."""
    if g < 0.0:
        raise ValueError(f"gap_loglik: negative gap {g}")
    val, da, dwt = _gap_loglik_parts(a.value, wt.value, g)
    return a.tape._push(val, (a, wt), _bwd_gap_loglik, aux=(da, dwt), op="gap_loglik")


def _bwd_pois_loglik(n):
    _acc(n.parents[0], n.adjoint * n.aux)


def pois_loglik(log_rate, k):
    """log Poisson(k; exp(log_rate)), differentiable in the log rate."""
    lpr = log_rate.value
    if abs(lpr) > 700.0:
        raise NumericalError(f"pois_loglik: rate exponent {lpr:.3g} out of range")
    rate = math.exp(lpr)
    val = k * lpr - rate - math.lgamma(k + 1.0)
    return log_rate.tape._push(
        val, (log_rate,), _bwd_pois_loglik, aux=k - rate, op="pois_loglik"
    )


def _bwd_step_state(n):
    # hand the carried-state adjoint to the owning fused step node; the slot
    # is consumed (and reset) when that node's backward runs
    n.parents[0].aux[-1] = n.adjoint


def _bwd_elbo_step(n):
    (state, W, b, qW1, qb1, qW2, qb2, pW1, pb1, pW2, pb2,
     wz, wh, wt, bt, dwz, dwh, dbb) = n.parents
    out, gates, xh, y1, p1, sc, gf, df, eps, d_next, full_latent, dout = n.aux
    n.aux[-1] = None
    if dout is None:
        dout = np.zeros(out.shape)
    bufs = []
    for p in (W, b, qW1, qb1, qW2, qb2, pW1, pb1, pW2, pb2, wh, dwh):
        if p.adjoint is None:
            p.adjoint = np.zeros(p.value.shape)
        bufs.append(p.adjoint)
    dstate, dwz_s, dwt_s, dbt_s, ddwz_s, ddb_s = K.step_bwd(
        state.value, W.value, qW1.value, qW2.value, pW1.value, pW2.value,
        wz.value, wh.value, dwz.value, dwh.value,
        gf, df, eps, d_next, full_latent,
        out, gates, xh, y1, p1, sc,
        n.adjoint, dout,
        bufs[0], bufs[1], bufs[2], bufs[3], bufs[4], bufs[5],
        bufs[6], bufs[7], bufs[8], bufs[9], bufs[10], bufs[11],
    )
    _acc(state, dstate)
    _acc(wz, dwz_s)
    _acc(wt, dwt_s)
    _acc(bt, dbt_s)
    _acc(dwz, ddwz_s)
    _acc(dbb, ddb_s)


def elbo_step(state, pn, g_feat, d_feat, eps, g_next, d_next, full_latent):
    """Fused training step: posterior/prior MLPs, KL, latent draw, LSTM
    update, both heads, and the next observation's log-likelihood, recorded
    as two nodes (scalar ELBO term + carried state).

    ``pn`` maps parameter names to their leaf nodes.  Array-parameter
    gradients accumulate directly into the leaves' adjoint buffers during
    backward; per-step BPTT structure is preserved through the carried-state
    node chain.
    """
    parents = (
        state,
        pn["lstm_W"], pn["lstm_b"],
        pn["post_W1"], pn["post_b1"], pn["post_W2"], pn["post_b2"],
        pn["prior_W1"], pn["prior_b1"], pn["prior_W2"], pn["prior_b2"],
        pn["head_wz"], pn["head_wh"], pn["head_wt"], pn["head_bt"],
        pn["dur_wz"], pn["dur_wh"], pn["dur_b"],
    )
    try:
        term, out, gates, xh, y1, p1, sc = K.step_fwd(
            state.value,
            parents[1].value, parents[2].value,
            parents[3].value, parents[4].value, parents[5].value, parents[6].value,
            parents[7].value, parents[8].value, parents[9].value, parents[10].value,
            parents[11].value, parents[12].value, parents[13].value, parents[14].value,
            parents[15].value, parents[16].value, parents[17].value,
            g_feat, d_feat, eps, g_next, float(d_next), full_latent,
        )
    except ValueError as exc:
        raise NumericalError(f"elbo_step: {exc}") from None
    if not math.isfinite(term):
        raise NumericalError("elbo_step: non-finite ELBO term")
    if sc[11] < -1e-12:
        raise NumericalError(f"elbo_step: negative KL {sc[11]:.3e}")
    aux = [out, gates, xh, y1, p1, sc, g_feat, d_feat, eps, float(d_next), full_latent, None]
    term_node = state.tape._push(term, parents, _bwd_elbo_step, aux=aux, op="elbo_step")
    state_node = state.tape._push(out, (term_node,), _bwd_step_state, op="step_state")
    return term_node, state_node


# ------------------------------------------------------------------ backward


def backward(loss):
    """Populate adjoints by a reverse sweep; returns {param node: gradient}.

    The loss must be scalar.  Forward values are untouched, and repeated
    calls reset adjoints first, so results are identical across calls.
    """
    if not isinstance(loss.value, float):
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    nodes = tape.nodes
    for n in nodes:
        n.adjoint = None
    loss.adjoint = 1.0
    for i in range(loss.idx, -1, -1):
        n = nodes[i]
        if n.adjoint is not None and n.bwd is not None:
            n.bwd(n)
    out = {}
    for p in tape.params:
        if p.adjoint is None:
            out[p] = 0.0 if isinstance(p.value, float) else np.zeros(p.value.shape)
        else:
            out[p] = p.adjoint
    return out


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    """Per-parameter relative errors of analytic vs central-difference grads."""

    per_param: dict = field(default_factory=dict)
    max_rel_err: float = 0.0
    tol: float = 1e-4

    @property
    def passed(self):
        return self.max_rel_err < self.tol

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.1e}"


def _rel_err(a, b):
    denom = max(abs(a), abs(b), 1e-6)
    return abs(a - b) / denom


def grad_check(build, params, h=1e-5, tol=1e-4):
    """Check analytic gradients of a tape-building function.

    ``build(tape, nodes)`` must return a scalar loss node, where ``nodes``
    maps each name in ``params`` to a parameter node.  The function has to be
    deterministic (freeze any random draws before calling).
    """

    def forward(values):
        tape = Tape()
        nodes = {name: tape.param(v) for name, v in values.items()}
        loss = build(tape, nodes)
        if not math.isfinite(loss.value):
            raise NumericalError("grad_check: non-finite forward value")
        return loss.value, nodes, loss

    base = {name: _coerce(v) for name, v in params.items()}
    _, nodes, loss = forward(base)
    grads = backward(loss)
    by_name = {name: grads[node] for name, node in nodes.items()}

    report = GradCheckReport(tol=tol)
    for name, value in base.items():
        analytic = by_name[name]
        if isinstance(value, float):
            hi = dict(base, **{name: value + h})
            lo = dict(base, **{name: value - h})
            fd = (forward(hi)[0] - forward(lo)[0]) / (2.0 * h)
            worst = _rel_err(float(analytic), fd)
        else:
            worst = 0.0
            flat = value.ravel()
            for j in range(flat.size):
                bumped = value.copy().ravel()
                bumped[j] = flat[j] + h
                hi = dict(base, **{name: bumped.reshape(value.shape)})
                bumped = value.copy().ravel()
                bumped[j] = flat[j] - h
                lo = dict(base, **{name: bumped.reshape(value.shape)})
                fd = (forward(hi)[0] - forward(lo)[0]) / (2.0 * h)
                worst = max(worst, _rel_err(float(np.asarray(analytic).ravel()[j]), fd))
        report.per_param[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    return report
