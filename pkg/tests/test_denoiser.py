import numpy as np
import pytest

from superct import denoiser as dn
from superct.denoiser import DenoiserSpec, TrainConfig


@pytest.fixture
def tiny():
    return DenoiserSpec.tiny(2)


def test_zero_weights_identity(rng):
    w = dn.zero_weights(DenoiserSpec())
    x = rng.uniform(0, 2000, (9, 7))
    assert np.allclose(dn.apply(w, x), x, rtol=0, atol=1e-9)


def test_network_is_nonlinear(rng, tiny):
    w = dn.init_weights(tiny, seed=3, last_gain=1.0)
    a = rng.uniform(0, 2000, (8, 8))
    b = rng.uniform(0, 2000, (8, 8))
    lhs = dn.apply(w, a + b)
    rhs = dn.apply(w, a) + dn.apply(w, b) - dn.apply(w, np.zeros((8, 8)))
    assert np.max(np.abs(lhs - rhs)) > 1e-3


def test_gradient_finite_differences(rng, tiny):
    w = dn.init_weights(tiny, seed=1, last_gain=1.0)
    xs = [rng.uniform(500, 1500, (6, 5)) for _ in range(2)]
    ts = [rng.uniform(500, 1500, (6, 5)) for _ in range(2)]
    _, g = dn.loss_and_gradient(w, xs, ts)
    h = 1e-6
    fd = np.empty_like(g)
    for k in range(w.theta.size):
        e = np.zeros_like(w.theta)
        e[k] = h
        lp, _ = dn.loss_and_gradient(dn.DenoiserWeights(tiny, w.theta + e), xs, ts)
        lm, _ = dn.loss_and_gradient(dn.DenoiserWeights(tiny, w.theta - e), xs, ts)
        fd[k] = (lp - lm) / (2 * h)
    assert np.max(np.abs(fd - g)) <= 1e-6 * max(1.0, np.max(np.abs(g)))


def test_loss_zero_at_own_output(rng, tiny):
    w = dn.init_weights(tiny, seed=2)
    x = rng.uniform(0, 2000, (7, 7))
    loss, g = dn.loss_and_gradient(w, [x], [dn.apply(w, x)])
    assert loss < 1e-20 and np.max(np.abs(g)) < 1e-10


def test_duplicated_batch_doubles(rng, tiny):
    w = dn.init_weights(tiny, seed=2)
    x, t = rng.uniform(0, 2000, (2, 6, 6))
    l1, g1 = dn.loss_and_gradient(w, [x], [t])
    l2, g2 = dn.loss_and_gradient(w, [x, x], [t, t])
    assert l2 == pytest.approx(2 * l1, rel=1e-12)
    assert np.allclose(g2, 2 * g1, rtol=1e-12, atol=0)


def test_translation_covariance(rng):
    w = dn.init_weights(DenoiserSpec(), seed=4, last_gain=1.0)
    x = rng.uniform(0, 2000, (20, 20))
    y = dn.apply(w, x)
    ys = dn.apply(w, np.roll(x, (3, 2), axis=(0, 1)))
    # away from the zero-padded border the map commutes with shifts (receptive radius 3)
    assert np.allclose(np.roll(y, (3, 2), axis=(0, 1))[6:-6, 6:-6], ys[6:-6, 6:-6], atol=1e-9)


def test_batch_independence(rng, tiny):
    w = dn.init_weights(tiny, seed=5)
    a, b = rng.uniform(0, 2000, (2, 6, 6))
    la, ga = dn.loss_and_gradient(w, [a], [b])
    lb, gb = dn.loss_and_gradient(w, [b], [a])
    l, g = dn.loss_and_gradient(w, [a, b], [b, a])
    assert l == pytest.approx(la + lb, rel=1e-12)
    assert np.allclose(g, ga + gb, rtol=1e-12, atol=1e-15)


def _pairs(rng, n=6, side=16):
    pairs = []
    for _ in range(n):
        t = np.full((side, side), 1000.0)
        t[4:12, 4:12] = 1200.0
        pairs.append((t + rng.normal(0, 40, t.shape), t))
    return pairs


@pytest.mark.parametrize("opt", ["sgd", "adam"])
def test_training_decreases_loss(rng, opt):
    pairs = _pairs(rng)
    lr = 0.05 if opt == "sgd" else 3e-3
    w = dn.train(DenoiserSpec(), None, pairs, TrainConfig(epochs=25, learning_rate=lr, batch=2, optimizer=opt))
    curve = w.meta["loss_curve"]
    assert len(curve) == 25 and curve[-1] < 0.8 * curve[0]


def test_training_deterministic(rng, tiny):
    pairs = _pairs(rng, 4, 10)
    cfg = TrainConfig(epochs=3, learning_rate=1e-2, batch=3, seed=9, crop=6)
    a = dn.train(tiny, None, pairs, cfg)
    b = dn.train(tiny, None, pairs, cfg)
    assert np.array_equal(a.theta, b.theta)
    assert a.meta["loss_curve"] == b.meta["loss_curve"]


def test_bad_configs(rng, tiny):
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        dn.train(tiny, None, [], TrainConfig())
    with pytest.raises(dn.ModelError):
        dn.train(tiny, dn.zero_weights(DenoiserSpec()), _pairs(rng, 1, 8), TrainConfig(epochs=1))
    with pytest.raises(dn.ModelError):
        DenoiserSpec((("conv", 4),))
    with pytest.raises(dn.ModelError):
        dn.DenoiserWeights(tiny, np.zeros(3))
    with pytest.raises(dn.TrainingError):
        dn.train(tiny, None, [(np.full((6, 6), np.nan), np.zeros((6, 6)))], TrainConfig(epochs=1))


def test_save_load_roundtrip(tmp_path, rng, tiny):
    w = dn.init_weights(DenoiserSpec(), seed=7).stored()
    w.meta = {"epochs": 3}
    w.save(tmp_path / "w.dn")
    r = dn.DenoiserWeights.load(tmp_path / "w.dn")
    assert r.spec == w.spec and r.hu_window == w.hu_window and r.meta == w.meta
    assert np.array_equal(r.theta, w.theta)
    x = rng.uniform(0, 2000, (12, 12))
    assert np.array_equal(dn.apply(r, x), dn.apply(w, x))
