import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from superct import ultra
from superct.ultra import PatchConfig


def test_patch_counts_and_order():
    img = np.arange(16.0).reshape(4, 4)
    P = ultra.extract_patches(img, PatchConfig(2, 2))
    assert P.shape == (4, 4)
    # tiles, column-major within a patch, patches row-major by origin
    assert P[:, 0].tolist() == [0, 4, 1, 5]
    assert P[:, 1].tolist() == [2, 6, 3, 7]
    assert sorted(P.ravel().tolist()) == list(range(16))
    one = ultra.extract_patches(img, PatchConfig(4, 1))
    assert one.shape == (16, 1) and np.array_equal(one[:, 0], img.ravel(order="F"))
    five = np.arange(25.0).reshape(5, 5)
    P = ultra.extract_patches(five, PatchConfig(3, 1))
    assert P.shape == (9, 9)
    assert np.array_equal(P[:, 0], five[:3, :3].ravel(order="F"))
    with pytest.raises(ValueError):
        ultra.extract_patches(img, PatchConfig(5, 1))


@settings(max_examples=25, deadline=None)
@given(side=st.integers(1, 4), stride=st.integers(1, 3), r=st.integers(4, 9), c=st.integers(4, 9))
def test_patch_adjoint(side, stride, r, c):
    rng = np.random.default_rng(r * 100 + c)
    cfg = PatchConfig(side, stride)
    x = rng.normal(size=(r, c))
    nr, nc = cfg.grid((r, c))
    assert nr == (r - side) // stride + 1 and nc == (c - side) // stride + 1
    V = rng.normal(size=(side * side, nr * nc))
    lhs = np.sum(ultra.extract_patches(x, cfg) * V)
    rhs = np.sum(x * ultra.patch_adjoint(V, (r, c), cfg))
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_hard_threshold():
    assert ultra.hard_threshold([25, -10, 0], 20).tolist() == [25, 0, 0]
    v = np.array([-3.0, 0.5, 7.0])
    assert np.array_equal(ultra.hard_threshold(v, 0), v)
    assert ultra.hard_threshold([-20, 19.999], 20).tolist() == [-20, 0]


def _brute_force(X, T, gamma):
    """Exhaustive search over (cluster, support) per patch."""
    K, m, _ = T.shape
    out_k, out_z = [], []
    for x in X.T:
        best = (math.inf, None, None)
        for k in range(K):
            v = T[k] @ x
            for mask in itertools.product([0, 1], repeat=m):
                mask = np.array(mask, bool)
                # a coefficient may be kept only if it survives thresholding
                if np.any(np.abs(v[mask]) < gamma):
                    continue
                z = np.where(mask, v, 0.0)
                cost = np.sum((v - z) ** 2) + gamma ** 2 * mask.sum()
                if cost < best[0] - 1e-12:
                    best = (cost, k, z)
        out_k.append(best[1])
        out_z.append(best[2])
    return np.array(out_k), np.array(out_z).T


@pytest.mark.parametrize("seed", range(5))
def test_sparse_code_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    K, m, N = 3, 4, 50
    T = rng.normal(size=(K, m, m))
    X = rng.normal(size=(m, N)) * 2
    res = ultra.sparse_code_and_cluster(X, T, 1.0)
    k, Z = _brute_force(X, T, 1.0)
    assert np.array_equal(res.clusters, k)
    assert np.allclose(res.codes, Z, atol=1e-12)


def test_sparse_code_k1_and_special_patch(rng):
    T = rng.normal(size=(1, 4, 4))
    X = rng.normal(size=(4, 30))
    res = ultra.sparse_code_and_cluster(X, T, 0.5)
    assert np.all(res.clusters == 0)
    assert np.array_equal(res.codes, ultra.hard_threshold(T[0] @ X, 0.5))
    # cluster 2 (index 1) annihilates the patch; cluster 1 keeps everything
    T2 = np.stack([np.eye(2) * 100.0, np.array([[1.0, -1.0], [2.0, -2.0]])])
    res = ultra.sparse_code_and_cluster(np.array([[1.0], [1.0]]), T2, 20.0)
    assert res.clusters.tolist() == [1] and not np.any(res.codes)
    empty = ultra.sparse_code_and_cluster(np.zeros((4, 0)), T, 1.0)
    assert empty.codes.shape == (4, 0) and empty.objective == 0.0


def test_clustering_permutation_equivariant(rng):
    T = rng.normal(size=(3, 4, 4))
    X = rng.normal(size=(4, 40))
    p = rng.permutation(40)
    a = ultra.sparse_code_and_cluster(X, T, 0.8)
    b = ultra.sparse_code_and_cluster(X[:, p], T, 0.8)
    assert np.array_equal(a.clusters[p], b.clusters)
    assert np.array_equal(a.codes[:, p], b.codes)


def _tl_obj(Om, X, Z, lam):
    return np.sum((Om @ X - Z) ** 2) + lam * ultra.transform_penalty(Om)


def test_update_transform_scalar_case():
    # Omega = c I; m[(c-1)^2 + c^2 - log c] is minimized at c = (1 + sqrt 5) / 4
    Om = ultra.update_transform(np.eye(3), np.eye(3), 1.0)
    c = (1 + math.sqrt(5)) / 4
    assert np.allclose(Om, c * np.eye(3), atol=1e-12)
    grid = np.linspace(0.01, 3, 300001)
    f = (grid - 1) ** 2 + grid ** 2 - np.log(grid)
    assert grid[np.argmin(f)] == pytest.approx(c, abs=1e-5)


def test_update_transform_is_minimizer(rng):
    X = rng.normal(size=(2, 30))
    Z = ultra.hard_threshold(rng.normal(size=(2, 30)), 0.5)
    Om = ultra.update_transform(X, Z, 1.0)
    best = _tl_obj(Om, X, Z, 1.0)
    for _ in range(2000):
        cand = Om + rng.normal(scale=0.05, size=(2, 2))
        assert _tl_obj(cand, X, Z, 1.0) >= best - 1e-12
    with pytest.raises(ultra.DataError):
        ultra.update_transform(np.full((2, 2), np.nan), np.eye(2), 1.0)
    with pytest.raises(ValueError):
        ultra.update_transform(X, Z, 0.0)


def _images(n=3, size=24, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        im = np.zeros((size, size))
        for _ in range(4):
            r, c, h, w = rng.integers(0, size - 4, 4)
            im[r:r + h, c:c + w] += rng.uniform(50, 200)
        out.append(im + rng.normal(0, 2, im.shape))
    return out


def test_learn_ultra_monotone_and_deterministic():
    ims = _images()
    cfg = PatchConfig(4, 2)
    a = ultra.learn_ultra(ims, 3, cfg, iters=10, lambda0=0.05, eta=5.0, seed=4)
    b = ultra.learn_ultra(ims, 3, cfg, iters=10, lambda0=0.05, eta=5.0, seed=4)
    assert np.array_equal(a.transforms, b.transforms)
    tr = np.array(a.objective_trace)
    assert np.all(np.diff(tr) <= 1e-9 * np.abs(tr[:-1]))
    assert a.transforms.shape == (3, 16, 16)
    assert all(abs(np.linalg.det(t)) > 1e-12 for t in a.transforms)


def test_learn_ultra_k1_eta0():
    b = ultra.learn_ultra(_images(2), 1, PatchConfig(3, 1), iters=4, lambda0=0.1, eta=0.0)
    tr = np.array(b.objective_trace)
    assert np.all(np.diff(tr) <= 1e-9 * np.abs(tr[:-1]))


def test_bank_round_trip(tmp_path):
    b = ultra.learn_ultra(_images(2), 2, PatchConfig(3, 1), iters=2, lambda0=0.1, eta=2.0, seed=1)
    b.save(tmp_path / "bank.sprg")
    c = ultra.TransformBank.load(tmp_path / "bank.sprg")
    assert np.array_equal(b.transforms, c.transforms)
    assert (c.K, c.m, c.patch_cfg, c.training_seed) == (2, 9, PatchConfig(3, 1), 1)


def test_dct_is_orthonormal():
    D = ultra.dct_matrix(4)
    assert np.allclose(D @ D.T, np.eye(16), atol=1e-12)
