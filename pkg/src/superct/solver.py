"""PWLS solvers with an optional anchor term mu * ||x - anchor||^2.

All costs are minimized by a monotone accelerated majorize-minimize scheme:
each step minimizes a diagonal (separable) quadratic surrogate at a
momentum-extrapolated point, and is accepted only if it does not raise the
true cost; otherwise momentum is reset and a plain surrogate step is taken
from the current iterate, which cannot increase the cost. Every term keeps
an affine "state" (``A x``, patch residuals) so the extrapolated state is a
linear combination of states already computed, and each iteration needs one
forward and one adjoint projection.
"""

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import regularizers as reg
from .tomo import FanBeamGeometry, get_projector
from .ultra import extract_patches

log = logging.getLogger(__name__)


class SolverDivergence(RuntimeError):
    pass


@dataclass
class SolveConfig:
    iters: int = 20          # outer iterations (ULTRA: alternations)
    inner_iters: int = 5     # ULTRA image-update iterations per alternation
    tol: float = 0.0         # early stop on relative cost change; 0 disables

    def __post_init__(self):
        if self.iters < 1 or self.inner_iters < 1:
            raise ValueError("iters and inner_iters must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class SolveTrace:
    costs: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    @property
    def iterations(self):
        return max(len(self.costs) - 1, 0)

    def record(self, cost, t0):
        if not math.isfinite(cost):
            raise SolverDivergence(f"non-finite cost at iteration {len(self.costs)}")
        self.costs.append(float(cost))
        self.seconds.append(time.perf_counter() - t0)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "cost", "seconds"])
            for i, (c, s) in enumerate(zip(self.costs, self.seconds)):
                w.writerow([i, repr(c), f"{s:.6f}"])


# ----------------------------------------------------------------------------
# cost terms


class WlsTerm:
    """||y - A x||_W^2."""

    def __init__(self, op, y, w):
        self.op = op
        self.y = np.asarray(y, dtype=np.float64)
        self.w = np.asarray(w, dtype=np.float64)
        if self.y.shape != tuple(op.sino_shape) or self.w.shape != self.y.shape:
            raise ValueError("data and weights must match the operator's sinogram shape")
        self._diag = None

    def state(self, x):
        return self.op.forward(x)

    def value(self, x, s):
        r = s - self.y
        return float(np.sum(self.w * r * r))

    def gradient(self, x, s):
        return 2.0 * self.op.adjoint(self.w * (s - self.y))

    def diag(self, x, s):
        if self._diag is None:
            # De Pierro bound: A^T W A <= diag(A^T W A 1) for nonnegative A
            self._diag = 2.0 * self.op.adjoint(self.w * self.op.forward(np.ones(self.op.image_shape)))
        return self._diag


class AnchorTerm:
    """mu ||x - anchor||^2."""

    def __init__(self, mu, anchor):
        self.mu = float(mu)
        self.anchor = np.asarray(anchor, dtype=np.float64)

    def state(self, x):
        return None

    def value(self, x, s):
        return self.mu * float(np.sum((x - self.anchor) ** 2))

    def gradient(self, x, s):
        return 2.0 * self.mu * (x - self.anchor)

    def diag(self, x, s):
        return 2.0 * self.mu


class EpTerm:
    """beta R_EP(x), majorized with the Huber-type curvature at the expansion point."""

    def __init__(self, p):
        self.p = p

    def state(self, x):
        return None

    def value(self, x, s):
        return self.p.beta * reg.ep_value(x, self.p)

    def gradient(self, x, s):
        return self.p.beta * reg.ep_gradient(x, self.p)

    def diag(self, x, s):
        return self.p.beta * reg.ep_majorizer_diag(x, self.p)


class UltraQuadTerm:
    """beta sum_j tau_j ||Omega_k P_j x - z_j||^2 at fixed codes and clusters."""

    def __init__(self, st, beta, shape):
        self.st = st
        self.beta = float(beta)
        self.shape = tuple(shape)
        self._diag = 2.0 * self.beta * st.majorizer_diag(self.shape)

    def state(self, x):
        return self.st.residual_sorted(extract_patches(x, self.st.patch_cfg))

    def value(self, x, s):
        return self.beta * self.st.sorted_value(s)

    def gradient(self, x, s):
        return 2.0 * self.beta * self.st.back_sorted(s, self.shape)

    def diag(self, x, s):
        return self._diag


def _extrapolate(a, c, cb):
    """a + cb (a - c) for arrays or None states."""
    if a is None:
        return None
    out = a - c
    out *= cb
    out += a
    return out


def _states(terms, x):
    return [t.state(x) for t in terms]


def _cost(terms, x, states):
    return sum(t.value(x, s) for t, s in zip(terms, states))


def _mm_step(terms, x, states):
    g = sum(t.gradient(x, s) for t, s in zip(terms, states))
    D = np.zeros(np.shape(x))
    for t, s in zip(terms, states):
        D = D + t.diag(x, s)
    step = np.zeros(np.shape(x))
    np.divide(g, D, out=step, where=D > 0)
    return x - step


def minimize(terms, x0, iters, trace=None, tol=0.0, states=None):
    """Monotone accelerated MM on a sum of terms.

    Returns ``(x, states, cost)`` at the final iterate. ``states`` may pass
    precomputed term states for ``x0``.
    """
    t0 = time.perf_counter()
    trace = SolveTrace() if trace is None else trace
    x = np.array(x0, dtype=np.float64)
    s = _states(terms, x) if states is None else states
    f = _cost(terms, x, s)
    trace.record(f, t0)
    z, sz, t = x, s, 1.0
    for it in range(iters):
        xc = _mm_step(terms, z, sz)
        sc = _states(terms, xc)
        fc = _cost(terms, xc, sc)
        if not math.isfinite(fc):
            raise SolverDivergence(f"non-finite cost at iteration {it + 1}")
        if fc <= f:
            t_new = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
            cb = (t - 1) / t_new
            z = _extrapolate(xc, x, cb)
            sz = [_extrapolate(a, c, cb) for a, c in zip(sc, s)]
            x_old_f = f
            x, s, f, t = xc, sc, fc, t_new
        else:
            # restart: plain surrogate step from the current iterate
            xm = _mm_step(terms, x, s)
            sm = _states(terms, xm)
            fm = _cost(terms, xm, sm)
            x_old_f = f
            if fm <= f:
                x, s, f = xm, sm, fm
            z, sz, t = x, s, 1.0
        trace.record(f, t0)
        if tol > 0 and abs(x_old_f - f) <= tol * max(abs(x_old_f), 1e-300):
            break
    return x, s, f


def as_operator(op):
    """Accept a geometry or an operator handle."""
    return get_projector(op) if isinstance(op, FanBeamGeometry) else op


def _data_terms(y, W, op):
    return [WlsTerm(as_operator(op), y, W)]


def _anchor_terms(mu, anchor):
    if mu > 0:
        if anchor is None:
            raise ValueError("mu > 0 requires an anchor image")
        return [AnchorTerm(mu, anchor)]
    return []


def solve_quadratic_anchor(y, W, op, quad_reg, mu, anchor, x0, cfg):
    """PWLS with an optional fixed-code ULTRA quadratic and anchor term.

    ``quad_reg`` is ``None`` or ``(UltraRegState, beta)``.
    """
    terms = _data_terms(y, W, op)
    if quad_reg is not None and quad_reg[1] > 0:
        st, beta = quad_reg
        terms.append(UltraQuadTerm(st, beta, terms[0].op.image_shape))
    terms += _anchor_terms(mu, anchor)
    trace = SolveTrace()
    x, _, _ = minimize(terms, x0, cfg.iters, trace, cfg.tol)
    return x, trace


def ep_cost(y, W, op, ep, mu, anchor, x):
    terms = _data_terms(y, W, op) + ([EpTerm(ep)] if ep.beta > 0 else []) + _anchor_terms(mu, anchor)
    return _cost(terms, x, _states(terms, x))


def solve_ep(y, W, op, ep, mu, anchor, x0, cfg):
    terms = _data_terms(y, W, op)
    if ep is not None and ep.beta > 0:
        terms.append(EpTerm(ep))
    terms += _anchor_terms(mu, anchor)
    trace = SolveTrace()
    x, _, _ = minimize(terms, x0, cfg.iters, trace, cfg.tol)
    return x, trace


def ultra_joint_cost(y, W, op, st, beta, mu, anchor, x):
    """Data + beta R_ULTRA (at the stored codes) + anchor."""
    f = WlsTerm(as_operator(op), y, W)
    c = f.value(x, f.state(x))
    if beta > 0:
        c += beta * reg.ultra_reg_value(x, st)
    if mu > 0:
        c += mu * float(np.sum((x - anchor) ** 2))
    return c


def solve_ultra(y, W, op, bank, gamma, tau, beta, mu, anchor, x0, cfg, patch_cfg=None):
    """Alternate inner image updates at fixed codes with exact sparse coding.

    Returns ``(x, trace, state)``; the trace holds the joint cost after the
    initial coding and after every alternation.
    """
    t0 = time.perf_counter()
    op = as_operator(op)
    st = reg.UltraRegState.from_bank(bank, gamma, tau, patch_cfg)
    x = np.array(x0, dtype=np.float64)
    data = WlsTerm(op, y, W)
    fixed = [data] + _anchor_terms(mu, anchor)
    s_fixed = _states(fixed, x)

    def recode(x):
        # exact sparse coding at x; returns the fixed-code term, its state and its joint cost share
        st.refresh(x)
        if beta == 0:
            return [], [], 0.0
        u = UltraQuadTerm(st, beta, op.image_shape)
        us = u.state(x)
        return [u], [us], u.value(x, us) + beta * st.support_penalty()

    uterms, ustates, ucost = recode(x)
    trace = SolveTrace()
    trace.record(_cost(fixed, x, s_fixed) + ucost, t0)
    for _ in range(cfg.iters):
        x, s, _ = minimize(fixed + uterms, x, cfg.inner_iters, states=s_fixed + ustates)
        s_fixed = s[:len(fixed)]
        uterms, ustates, ucost = recode(x)
        trace.record(_cost(fixed, x, s_fixed) + ucost, t0)
        if cfg.tol > 0:
            a, b = trace.costs[-2], trace.costs[-1]
            if abs(a - b) <= cfg.tol * abs(a):
                break
    return x, trace, st


def pwls_ep_baseline(y, W, op, x0, beta=2.0 ** 16, delta=20.0, iters=100, kappa=None):
    """Standalone PWLS-EP; defaults are the published full-scale settings."""
    ep = reg.EpParams(delta=delta, beta=beta, kappa=kappa)
    x, _ = solve_ep(y, W, op, ep, 0.0, None, x0, SolveConfig(iters=iters))
    return x


def pwls_ultra_baseline(y, W, op, x0, bank, tau, beta=1e4, gamma=25.0, iters=1000, inner_iters=5,
                        patch_cfg=None):
    """Standalone PWLS-ULTRA; defaults are the published full-scale settings."""
    x, _, _ = solve_ultra(y, W, op, bank, gamma, tau, beta, 0.0, None, x0,
                          SolveConfig(iters=iters, inner_iters=inner_iters), patch_cfg)
    return x
