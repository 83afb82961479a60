import numpy as np
import pytest
from scipy.sparse.linalg import LinearOperator, cg

from superct import regularizers as reg
from superct import solver, tomo, ultra
from superct.tomo import FanBeamGeometry, ray_endpoints
from superct.ultra import PatchConfig

# acceptance criterion number -> PASS/FAIL line, printed in the terminal summary
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


def small_geom(n=16, n_views=24, n_dets=32, detector="arc"):
    """Fan geometry whose fan covers an n x n grid of 1 mm pixels."""
    return FanBeamGeometry(n_dets=n_dets, n_views=n_views, det_spacing_mm=1.6 * n / n_dets,
                           source_to_det_mm=4.0 * n, source_to_center_mm=2.0 * n,
                           image_rows=n, image_cols=n, pixel_size_mm=1.0, detector=detector)


def clip_length(p0, p1, xmin, xmax, ymin, ymax):
    """Liang-Barsky: length of segment p0->p1 inside each box (vectorized over boxes)."""
    d = p1 - p0
    t0 = np.zeros(np.shape(xmin))
    t1 = np.ones(np.shape(xmin))
    for p, lo, hi in ((0, xmin, xmax), (1, ymin, ymax)):
        if d[p] == 0:
            outside = (p0[p] < lo) | (p0[p] > hi)
            t1 = np.where(outside, -1.0, t1)
            continue
        a = (lo - p0[p]) / d[p]
        b = (hi - p0[p]) / d[p]
        t0 = np.maximum(t0, np.minimum(a, b))
        t1 = np.minimum(t1, np.maximum(a, b))
    return np.maximum(t1 - t0, 0.0) * np.hypot(*d)


def dense_matrix(geom):
    """Explicit system matrix from per-pixel box clipping, independent of the traversal code."""
    src, dst = ray_endpoints(geom)
    src, dst = src.reshape(-1, 2), dst.reshape(-1, 2)
    R, C, px = geom.image_rows, geom.image_cols, geom.pixel_size_mm
    cx = (np.arange(C) - (C - 1) / 2) * px
    cy = ((R - 1) / 2 - np.arange(R)) * px
    X, Y = np.meshgrid(cx, cy)
    X, Y = X.ravel(), Y.ravel()
    A = np.zeros((src.shape[0], R * C))
    for i in range(src.shape[0]):
        A[i] = clip_length(src[i], dst[i], X - px / 2, X + px / 2, Y - px / 2, Y + px / 2)
    return A


@pytest.fixture(scope="session")
def geom16():
    return small_geom()


@pytest.fixture(scope="session")
def dense16(geom16):
    return dense_matrix(geom16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def quad_instance(seed, g):
    """Random 32^2 PWLS problem with a fixed-code ULTRA quadratic."""
    rng = np.random.default_rng(seed)
    op = tomo.get_projector(g)
    x_true = rng.uniform(800, 1200, g.image_shape)
    W = rng.uniform(0.2, 2.0, g.sino_shape)
    y = op.forward(x_true) + rng.normal(0, 5, g.sino_shape)
    cfg = PatchConfig(4, 1)
    T = ultra.initial_transforms(2, 4, rng)
    tau = reg.tau_weights(reg.kappa_map(op, W), cfg)
    st = reg.UltraRegState(T, 20.0, tau, cfg)
    st.refresh(x_true)
    return op, y, W, st, float(rng.uniform(10, 100))


def cg_oracle(op, y, W, st, beta, mu=0.0, anchor=None):
    """Minimizer of the quadratic via CG on the normal equations (tol 1e-10)."""
    shape = op.image_shape
    data = solver.WlsTerm(op, y, W)
    terms = [data, solver.UltraQuadTerm(st, beta, shape)]
    if mu > 0:
        terms.append(solver.AnchorTerm(mu, anchor))
    z = np.zeros(shape)
    b = -sum(t.gradient(z, t.state(z)) for t in terms)

    def hess(v):
        v = v.reshape(shape)
        return sum(t.gradient(v, t.state(v)) for t in terms).ravel() + b.ravel()

    n = shape[0] * shape[1]
    x, info = cg(LinearOperator((n, n), matvec=hess), b.ravel(), rtol=1e-10, maxiter=20000)
    assert info == 0
    x = x.reshape(shape)
    return x, solver._cost(terms, x, solver._states(terms, x))
