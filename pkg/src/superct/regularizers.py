"""Edge-preserving and ULTRA regularizers, plus the kappa / tau weight maps.

``ep_value`` and ``ultra_reg_value`` return the regularizer without the
``beta`` factor; solvers apply ``beta``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ultra

# unordered neighbour offsets; each pair is counted twice in the double sum
OFFSETS = {4: ((0, 1), (1, 0)), 8: ((0, 1), (1, 0), (1, 1), (1, -1))}


@dataclass
class EpParams:
    delta: float = 20.0
    beta: float = 1.0
    neighborhood: int = 8
    kappa: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.neighborhood not in OFFSETS:
            raise ValueError("neighborhood must be 4 or 8")


def potential(t, delta):
    a = np.abs(t) / delta
    return delta ** 2 * (a - np.log1p(a))


def potential_deriv(t, delta):
    return t / (1.0 + np.abs(t) / delta)


def ep_curvature(t, delta):
    """Huber-type surrogate curvature phi'(t)/t = 1/(1+|t/delta|)."""
    return 1.0 / (1.0 + np.abs(t) / delta)


def _pairs(shape, off):
    """Slices selecting (j, j+off) pairs fully inside the grid."""
    dr, dc = off
    R, C = shape
    a = (slice(0, R - dr), slice(max(0, -dc), C - max(0, dc)))
    b = (slice(dr, R), slice(max(0, dc), C - max(0, -dc)))
    return a, b


def _kappa(x, p):
    return np.ones(x.shape) if p.kappa is None else np.asarray(p.kappa, dtype=np.float64)


def ep_value(x, p):
    x = np.asarray(x, dtype=np.float64)
    k = _kappa(x, p)
    if k.shape != x.shape:
        raise ValueError("kappa map does not match the image")
    total = 0.0
    for off in OFFSETS[p.neighborhood]:
        a, b = _pairs(x.shape, off)
        total += np.sum(k[a] * k[b] * potential(x[a] - x[b], p.delta))
    return 2.0 * total


def ep_gradient(x, p):
    x = np.asarray(x, dtype=np.float64)
    k = _kappa(x, p)
    g = np.zeros(x.shape)
    for off in OFFSETS[p.neighborhood]:
        a, b = _pairs(x.shape, off)
        d = 2.0 * k[a] * k[b] * potential_deriv(x[a] - x[b], p.delta)
        g[a] += d
        g[b] -= d
    return g


def ep_majorizer_diag(x, p):
    """Diagonal Hessian of the separable quadratic surrogate of R_EP at x."""
    x = np.asarray(x, dtype=np.float64)
    k = _kappa(x, p)
    D = np.zeros(x.shape)
    for off in OFFSETS[p.neighborhood]:
        a, b = _pairs(x.shape, off)
        c = 4.0 * k[a] * k[b] * ep_curvature(x[a] - x[b], p.delta)
        D[a] += c
        D[b] += c
    return D


def kappa_map(op, W):
    """kappa_j = sqrt(sum_i a_ij w_i / sum_i a_ij), with 0/0 -> 0."""
    W = np.asarray(W, dtype=np.float64)
    if W.shape != tuple(op.sino_shape):
        raise ValueError("weights do not match the geometry")
    num = op.adjoint(W)
    den = op.adjoint(np.ones(W.shape))
    out = np.zeros(num.shape)
    np.divide(num, den, out=out, where=den > 0)
    return np.sqrt(np.maximum(out, 0.0))


def tau_weights(kappa, cfg, mode="kappa"):
    """Per-patch weights: mean of kappa^2 over the patch, normalized to mean 1."""
    if mode == "uniform":
        nr, nc = cfg.grid(np.shape(kappa))
        return np.ones(nr * nc)
    if mode != "kappa":
        raise ValueError(f"unknown tau mode {mode!r}")
    t = ultra.extract_patches(np.asarray(kappa, dtype=np.float64) ** 2, cfg).mean(axis=0)
    mean = t.mean()
    return t / mean if mean > 0 else np.ones_like(t)


class InternalError(RuntimeError):
    pass


@dataclass
class UltraRegState:
    transforms: np.ndarray
    gamma: float
    tau: np.ndarray
    patch_cfg: ultra.PatchConfig
    codes: np.ndarray = field(default=None, repr=False)
    clusters: np.ndarray = field(default=None, repr=False)

    @classmethod
    def from_bank(cls, bank, gamma, tau, patch_cfg=None):
        return cls(bank.transforms, float(gamma), np.asarray(tau, dtype=np.float64),
                   patch_cfg or bank.patch_cfg)

    def refresh(self, x):
        """Exact sparse coding and clustering at x (in place); returns the result."""
        X = ultra.extract_patches(x, self.patch_cfg)
        if self.tau.shape != (X.shape[1],):
            raise ValueError("tau does not match the patch count")
        res = ultra.sparse_code_and_cluster(X, self.transforms, self.gamma, self.tau)
        self.codes, self.clusters = res.codes, res.clusters
        self._index()
        return res

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=np.float64)
        if self.clusters is not None:
            self._index()

    def _index(self):
        # cluster-sorted copies let the solver work on contiguous column blocks
        self.clusters = np.asarray(self.clusters, dtype=np.int64)
        self._perm = np.argsort(self.clusters, kind="stable")
        self._bounds = np.searchsorted(self.clusters[self._perm], np.arange(self.transforms.shape[0] + 1))
        self._codes_s = self.codes[:, self._perm]
        self._tau_s = self.tau[self._perm]

    def _check(self, X):
        if self.codes is None or self.codes.shape != X.shape:
            raise InternalError("ULTRA state has no codes for this image")

    def residual_sorted(self, X):
        """Residuals in cluster-sorted column order."""
        self._check(X)
        Xs = X[:, self._perm]
        R = np.empty_like(Xs)
        b = self._bounds
        for k in range(self.transforms.shape[0]):
            if b[k + 1] > b[k]:
                np.matmul(self.transforms[k], Xs[:, b[k]:b[k + 1]], out=R[:, b[k]:b[k + 1]])
        R -= self._codes_s
        return R

    def back_sorted(self, Rs, shape):
        """Adjoint of residual_sorted's linear part, weighted by tau."""
        U = np.empty_like(Rs)
        b = self._bounds
        Rt = Rs * self._tau_s
        for k in range(self.transforms.shape[0]):
            if b[k + 1] > b[k]:
                np.matmul(self.transforms[k].T, Rt[:, b[k]:b[k + 1]], out=U[:, b[k]:b[k + 1]])
        out = np.empty_like(U)
        out[:, self._perm] = U
        return ultra.patch_adjoint(out, shape, self.patch_cfg)

    def sorted_value(self, Rs):
        """Weighted squared residual of a cluster-sorted residual matrix."""
        return float(np.dot(self._tau_s, np.einsum("ij,ij->j", Rs, Rs)))

    def residual(self, X):
        """Omega_{k_j} x_j - z_j for every patch column."""
        Rs = self.residual_sorted(X)
        R = np.empty_like(Rs)
        R[:, self._perm] = Rs
        return R

    def back(self, R, shape):
        """sum_j tau_j P_j^T Omega_{k_j}^T r_j."""
        return self.back_sorted(R[:, self._perm], shape)

    def support_penalty(self):
        """gamma^2 times the tau-weighted code support size."""
        return self.gamma ** 2 * float(np.dot(self.tau, np.count_nonzero(self.codes, axis=0)))

    def majorizer_diag(self, shape):
        """Diagonal bound on sum_j tau_j P_j^T Omega^T Omega P_j."""
        norms = np.array([np.linalg.norm(t, 2) ** 2 for t in self.transforms])
        wts = self.tau * norms[self.clusters]
        m = self.patch_cfg.m
        return ultra.patch_adjoint(np.broadcast_to(wts, (m, wts.size)), shape, self.patch_cfg)


def ultra_reg_value(x, st):
    """Weighted sparsification error plus gamma^2 times the code support size."""
    Rs = st.residual_sorted(ultra.extract_patches(x, st.patch_cfg))
    return st.sorted_value(Rs) + st.support_penalty()


def ultra_reg_gradient(x, st):
    """Gradient of ultra_reg_value in x at fixed codes and clusters."""
    X = ultra.extract_patches(x, st.patch_cfg)
    return 2.0 * st.back(st.residual(X), np.shape(x))
