"""Union of learned sparsifying transforms (ULTRA).

Patches are vectorized column-major inside the patch and enumerated
row-major by patch origin; patch matrices are ``(m, n_patches)``.
Cluster labels are 0-based.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.fft import dct
from scipy.stats import special_ortho_group

from . import containers

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class PatchConfig:
    patch_side: int = 8
    stride: int = 1

    def __post_init__(self):
        if self.patch_side < 1 or self.stride < 1:
            raise ValueError("patch_side and stride must be positive")

    @property
    def m(self):
        return self.patch_side ** 2

    def grid(self, shape):
        """Number of patch origins along each axis."""
        s = self.patch_side
        if s > min(shape):
            raise ValueError(f"patch side {s} exceeds image shape {shape}")
        return ((shape[0] - s) // self.stride + 1, (shape[1] - s) // self.stride + 1)


def extract_patches(img, cfg):
    img = np.asarray(img, dtype=np.float64)
    nr, nc = cfg.grid(img.shape)
    s, st = cfg.patch_side, cfg.stride
    win = np.lib.stride_tricks.sliding_window_view(img, (s, s))[::st, ::st][:nr, :nc]
    # (nr, nc, s, s) -> column-major within the patch
    return np.ascontiguousarray(win.transpose(3, 2, 0, 1).reshape(s * s, nr * nc))


def patch_adjoint(V, shape, cfg):
    """Sum patch vectors back into an image (P^T applied to each column)."""
    nr, nc = cfg.grid(shape)
    s, st = cfg.patch_side, cfg.stride
    out = np.zeros(shape)
    V = V.reshape(s, s, nr, nc)  # (col offset, row offset, patch row, patch col)
    for b in range(s):
        for a in range(s):
            out[a:a + st * (nr - 1) + 1:st, b:b + st * (nc - 1) + 1:st] += V[b, a]
    return out


def hard_threshold(v, gamma):
    """Zero entries with |v| < gamma; ties survive."""
    v = np.asarray(v, dtype=np.float64)
    return np.where(np.abs(v) < gamma, 0.0, v)


def transform_penalty(omega):
    """Q(Omega) = ||Omega||_F^2 - log|det Omega|."""
    sign, logdet = np.linalg.slogdet(omega)
    if sign == 0:
        return np.inf
    return float(np.sum(omega ** 2) - logdet)


@dataclass
class SparseCodeResult:
    codes: np.ndarray      # (m, N)
    clusters: np.ndarray   # (N,) int, 0-based
    objective: float
    patch_costs: np.ndarray = field(repr=False, default=None)


def sparse_code_and_cluster(patches, transforms, threshold, tau=None, penalty=None, chunk=8192):
    """Exact joint minimization over codes and cluster labels.

    Per patch and cluster the cost is ``sum(min(v^2, threshold^2))`` with
    ``v = Omega_k x``, i.e. the thresholding residual plus ``threshold^2`` per
    kept coefficient. ``penalty`` (K, N) is added before the argmin; ``tau``
    weights the reported objective only (it cannot change the argmin).
    Ties go to the lowest cluster index.
    """
    X = np.asarray(patches, dtype=np.float64)
    T = np.asarray(transforms, dtype=np.float64)
    K, m, _ = T.shape
    if X.shape[0] != m:
        raise ValueError(f"patch length {X.shape[0]} does not match transforms ({m})")
    N = X.shape[1]
    codes = np.zeros((m, N))
    clusters = np.zeros(N, dtype=np.int64)
    costs = np.zeros(N)
    g2 = float(threshold) ** 2
    Tm = T.reshape(K * m, m)
    for lo in range(0, N, chunk):
        hi = min(N, lo + chunk)
        V = (Tm @ X[:, lo:hi]).reshape(K, m, hi - lo)
        C = np.minimum(V ** 2, g2).sum(axis=1)
        if penalty is not None:
            C = C + penalty[:, lo:hi]
        k = np.argmin(C, axis=0)
        clusters[lo:hi] = k
        costs[lo:hi] = C[k, np.arange(hi - lo)]
        codes[:, lo:hi] = hard_threshold(V[k, :, np.arange(hi - lo)].T, threshold)
    w = np.ones(N) if tau is None else np.asarray(tau, dtype=np.float64)
    return SparseCodeResult(codes, clusters, float(np.dot(w, costs)), costs)


def update_transform(X, Z, lam):
    """Global minimizer of ||Omega X - Z||_F^2 + lam (||Omega||_F^2 - log|det Omega|)."""
    X = np.asarray(X, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if lam <= 0:
        raise ValueError("lam must be positive")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Z)) and np.isfinite(lam)):
        raise DataError("non-finite input to transform update")
    m = X.shape[0]
    L = np.linalg.cholesky(X @ X.T + lam * np.eye(m))
    Linv = sla.solve_triangular(L, np.eye(m), lower=True)
    U, s, Vt = np.linalg.svd(Linv @ X @ Z.T)
    return 0.5 * (Vt.T * (s + np.sqrt(s ** 2 + 2 * lam))) @ U.T @ Linv


def dct_matrix(side):
    """2D orthonormal DCT acting on column-major vectorized patches."""
    C = dct(np.eye(side), norm="ortho", axis=0)
    return np.kron(C, C)


def initial_transforms(K, side, rng):
    D = dct_matrix(side)
    out = [D]
    for _ in range(K - 1):
        out.append(D @ special_ortho_group.rvs(side * side, random_state=rng))
    return np.stack(out)


@dataclass
class TransformBank:
    transforms: np.ndarray           # (K, m, m)
    lambda0: float
    eta: float
    patch_cfg: PatchConfig
    training_seed: int = 0
    objective_trace: list = field(default_factory=list)

    @property
    def K(self):
        return self.transforms.shape[0]

    @property
    def m(self):
        return self.transforms.shape[1]

    def save(self, path):
        return containers.write_grid(
            path, self.transforms.reshape(-1), "transform_bank", K=self.K, m=self.m,
            lambda0=self.lambda0, eta=self.eta, patch_side=self.patch_cfg.patch_side,
            stride=self.patch_cfg.stride, seed=self.training_seed,
            objective_trace=[float(v) for v in self.objective_trace])

    @classmethod
    def load(cls, path):
        arr, h = containers.read_grid(path, "transform_bank")
        T = arr.astype(np.float64).reshape(h["K"], h["m"], h["m"])
        return cls(T, h["lambda0"], h["eta"], PatchConfig(h["patch_side"], h["stride"]),
                   h["seed"], h.get("objective_trace", []))


def learning_objective(X, transforms, clusters, codes, eta, lambda0):
    """Value of the union-of-transforms learning cost at the given iterate."""
    K = transforms.shape[0]
    sq = np.sum(X ** 2, axis=0)
    total = 0.0
    for k in range(K):
        idx = clusters == k
        if not np.any(idx):
            continue
        R = transforms[k] @ X[:, idx] - codes[:, idx]
        total += np.sum(R ** 2) + eta ** 2 * np.count_nonzero(codes[:, idx])
        total += lambda0 * sq[idx].sum() * transform_penalty(transforms[k])
    return float(total)


def learn_ultra(images, K, cfg=PatchConfig(), iters=30, lambda0=31.0, eta=20.0, seed=0):
    """Alternate exact clustering/sparse coding and closed-form transform updates."""
    if iters < 1 or K < 1:
        raise ValueError("need iters >= 1 and K >= 1")
    X = np.concatenate([extract_patches(im, cfg) for im in images], axis=1)
    rng = np.random.default_rng(seed)
    T = initial_transforms(K, cfg.patch_side, rng)
    sq = np.sum(X ** 2, axis=0)
    trace = []
    for it in range(iters):
        # the lambda_k Q(Omega_k) term is a per-patch cost lambda0 ||x_i||^2 Q(Omega_k)
        q = np.array([transform_penalty(t) for t in T])
        sc = sparse_code_and_cluster(X, T, eta, penalty=lambda0 * np.outer(q, sq))
        for k in range(K):
            idx = sc.clusters == k
            if not np.any(idx):
                log.warning("cluster %d empty at iteration %d; re-seeding its transform", k, it)
                T[k] = dct_matrix(cfg.patch_side) @ special_ortho_group.rvs(cfg.m, random_state=rng)
                continue
            T[k] = update_transform(X[:, idx], sc.codes[:, idx], lambda0 * sq[idx].sum())
        trace.append(learning_objective(X, T, sc.clusters, sc.codes, eta, lambda0))
        log.info("ultra iteration %d objective %.6e", it, trace[-1])
    # stored at float32 precision so a saved bank reloads bit-identically
    T = T.astype(np.float32).astype(np.float64)
    return TransformBank(T, float(lambda0), float(eta), cfg, int(seed), trace)
