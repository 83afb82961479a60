"""Layer-wise SUPER training and reconstruction.

One SUPER layer maps an image x to ``argmin_x J(x, y) + mu ||x - G(x_prev)||^2``
started at the denoised image, where J is the PWLS cost with an EP or ULTRA
prior. Training greedily fits layer l's denoiser on (x^(l-1), x*) pairs and
then runs that layer on every training case.
"""

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import denoiser as dn
from . import metrics
from . import regularizers as reg
from . import solver
from .dose import to_hu_domain
from .tomo import FanBeamGeometry, get_projector
from .ultra import PatchConfig, TransformBank

log = logging.getLogger(__name__)

MODES = ("super", "sequential", "data-term-only", "supervised-only")


class LayerError(RuntimeError):
    """Solver or training failure with its layer and case context."""


@dataclass
class SuperConfig:
    L: int = 5
    prior: str = "ep"             # "ep", "ultra" or "none"
    mode: str = "super"
    beta: float = 2.0 ** 9
    mu: float = 5e4
    delta: float = 20.0           # EP
    neighborhood: int = 8         # EP
    gamma: float = 20.0           # ULTRA
    tau_mode: str = "kappa"       # ULTRA patch weights: "kappa" or "uniform"
    kappa_mode: str = "kappa"     # EP pixel weights: "kappa" or "uniform"
    recon_stride: int = 1         # ULTRA patch stride at reconstruction time
    iters: int = 20               # solver iterations (ULTRA: alternations)
    inner_iters: int = 5
    init: str = "denoised"        # MBIR start: "denoised" or "previous"
    denoiser_init: str = "random"  # each layer's net: "random" or "previous"
    layers: tuple = dn.DenoiserSpec().layers
    hu_window: tuple = (0.0, 2000.0)
    train: dict = field(default_factory=lambda: dn.TrainConfig().to_dict())
    seed: int = 0

    def __post_init__(self):
        self.layers = tuple(tuple(l) for l in self.layers)
        self.hu_window = tuple(float(v) for v in self.hu_window)
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.prior not in ("ep", "ultra", "none"):
            raise ValueError(f"unknown prior {self.prior!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.init not in ("denoised", "previous"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.denoiser_init not in ("random", "previous"):
            raise ValueError(f"unknown denoiser_init {self.denoiser_init!r}")
        if self.beta < 0 or self.mu < 0:
            raise ValueError("beta and mu must be nonnegative")
        solver.SolveConfig(self.iters, self.inner_iters)
        dn.TrainConfig(**self.train)

    @property
    def spec(self):
        return dn.DenoiserSpec(self.layers)

    @property
    def train_cfg(self):
        return dn.TrainConfig(**self.train)

    @property
    def solve_cfg(self):
        return solver.SolveConfig(self.iters, self.inner_iters)

    def effective(self):
        """(prior, beta, mu) after applying the ablation mode."""
        if self.mode == "data-term-only":
            return "none", 0.0, 0.0
        if self.mode == "supervised-only":
            return "none", 0.0, self.mu
        if self.prior == "none":
            return "none", 0.0, self.mu
        return self.prior, self.beta, self.mu

    def to_dict(self):
        d = asdict(self)
        d["layers"] = [list(l) for l in self.layers]
        d["hu_window"] = list(self.hu_window)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# hyperparameter presets; "paper-*" pin the published values verbatim, "desk-*"
# are tuned for the 128^2 desk geometry and its HU-domain data term
PRESETS = {
    "paper-ep": dict(L=15, prior="ep", beta=2.0 ** 15, delta=20.0, mu=5e4, iters=20,
                     train=dict(dn.TrainConfig(epochs=4).to_dict())),
    "paper-ultra": dict(L=15, prior="ultra", beta=5e3, gamma=20.0, mu=5e5, iters=20, inner_iters=5,
                        train=dict(dn.TrainConfig(epochs=4).to_dict())),
    "desk-ep": dict(L=5, prior="ep", beta=2.0 ** 9, delta=20.0, mu=1e6, iters=20,
                    train=dict(dn.TrainConfig(epochs=30, optimizer="adam", crop=64, batch=4).to_dict())),
    "desk-ultra": dict(L=5, prior="ultra", beta=1e6, gamma=25.0, mu=1e7, iters=10, inner_iters=5,
                       recon_stride=2,
                       train=dict(dn.TrainConfig(epochs=30, optimizer="adam", crop=64, batch=4).to_dict())),
}
PRESETS["desk"] = PRESETS["desk-ep"]


def preset(name, **overrides):
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d = dict(PRESETS[name])
    d["train"] = dict(d.get("train", dn.TrainConfig().to_dict()))
    train_over = overrides.pop("train", None) or {}
    d["train"].update(train_over)
    d.update(overrides)
    return SuperConfig(**d)


# desk-scale standalone baselines (the published counts are kept in solver defaults)
DESK_BASELINES = {
    "pwls-ep": dict(beta=2.0 ** 9, delta=20.0, iters=100),
    "pwls-ultra": dict(beta=3e5, gamma=25.0, iters=30, inner_iters=5),
}


# ----------------------------------------------------------------------------
# per-case reconstruction context


class CaseProblem:
    """Data term, weight maps and prior settings for one scan."""

    def __init__(self, y, W, geom, cfg, bank=None):
        self.op = get_projector(geom)
        self.yh = to_hu_domain(y)
        self.W = np.asarray(W, dtype=np.float64)
        self.cfg = cfg
        self.prior, self.beta, self.mu = cfg.effective()
        self.bank = bank
        if self.prior == "ep":
            kap = reg.kappa_map(self.op, self.W) if cfg.kappa_mode == "kappa" else None
            self.ep = reg.EpParams(cfg.delta, self.beta, cfg.neighborhood, kap)
        elif self.prior == "ultra":
            if bank is None:
                raise ValueError("the ULTRA prior needs a transform bank")
            self.patch_cfg = PatchConfig(bank.patch_cfg.patch_side, cfg.recon_stride)
            kap = reg.kappa_map(self.op, self.W)
            self.tau = reg.tau_weights(kap, self.patch_cfg, cfg.tau_mode)

    def mbir(self, start, anchor):
        """One layer's image update; returns (x, trace)."""
        cfg = self.cfg
        mu = self.mu
        anchor = anchor if mu > 0 else None
        if self.prior == "ultra":
            x, tr, _ = solver.solve_ultra(self.yh, self.W, self.op, self.bank, cfg.gamma, self.tau,
                                          self.beta, mu, anchor, start, cfg.solve_cfg, self.patch_cfg)
        elif self.prior == "ep":
            x, tr = solver.solve_ep(self.yh, self.W, self.op, self.ep, mu, anchor, start, cfg.solve_cfg)
        else:
            x, tr = solver.solve_quadratic_anchor(self.yh, self.W, self.op, None, mu, anchor, start,
                                                  cfg.solve_cfg)
        return x, tr


def super_layer(problem, w, x_prev):
    """Denoise, then (unless sequential) solve the anchored MBIR problem."""
    d = dn.apply(w, x_prev)
    if problem.cfg.mode == "sequential":
        return d, solver.SolveTrace()
    start = d if problem.cfg.init == "denoised" else x_prev
    return problem.mbir(start, d)


def image_hash(x):
    return hashlib.sha256(np.ascontiguousarray(x, dtype=np.float64).tobytes()).hexdigest()


# ----------------------------------------------------------------------------
# model


@dataclass
class LayeredSuperModel:
    config: SuperConfig
    layers: list                       # DenoiserWeights per layer
    geometry: FanBeamGeometry
    bank: TransformBank = None
    metrics: list = field(default_factory=list)        # per-layer dicts
    train_hashes: dict = field(default_factory=dict)   # case id -> per-layer image hashes

    @property
    def L(self):
        return len(self.layers)

    @property
    def config_hash(self):
        return self.config.hash()

    def model_hash(self):
        h = hashlib.sha256(self.config_hash.encode())
        for w in self.layers:
            h.update(np.asarray(w.theta, dtype=np.float64).tobytes())
        return h.hexdigest()

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, w in enumerate(self.layers):
            w.save(out / f"layer_{i:03d}.dn")
        bank_file = None
        if self.bank is not None:
            bank_file = "bank.sprg"
            self.bank.save(out / bank_file)
        manifest = {
            "L": self.L,
            "config": self.config.to_dict(),
            "config_hash": self.config_hash,
            "model_hash": self.model_hash(),
            "geometry": json.loads(self.geometry.to_json()),
            "bank": bank_file,
            "layers": [f"layer_{i:03d}.dn" for i in range(self.L)],
            "metrics": self.metrics,
            "train_hashes": self.train_hashes,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return out

    @classmethod
    def load(cls, model_dir):
        d = Path(model_dir)
        m = json.loads((d / "manifest.json").read_text())
        cfg = SuperConfig.from_dict(m["config"])
        if cfg.hash() != m["config_hash"]:
            raise ValueError(f"{d}: config hash mismatch")
        layers = [dn.DenoiserWeights.load(d / f) for f in m["layers"]]
        bank = TransformBank.load(d / m["bank"]) if m.get("bank") else None
        geom = FanBeamGeometry.from_json(json.dumps(m["geometry"]))
        return cls(cfg, layers, geom, bank, m.get("metrics", []), m.get("train_hashes", {}))


# ----------------------------------------------------------------------------
# training and reconstruction


def _map(fn, items, threads):
    with threadpool_limits(limits=1):
        if threads <= 1:
            return [fn(it) for it in items]
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))


def _layer_metrics(images, cases):
    rows = [metrics.evaluate(x, c.x_star) for x, c in zip(images, cases)]
    return {k: float(np.mean([r[k] for r in rows])) for k in ("rmse", "snr", "ssim")}


def super_train(cases, val, cfg, geom, bank=None, threads=1, keep_images=False):
    """Greedy layer-wise training; returns the model (and per-layer train images if asked)."""
    if not cases:
        raise ValueError("need at least one training case")
    if cfg.effective()[0] == "ultra" and bank is None:
        raise ValueError("the ULTRA prior needs a learned transform bank")
    probs = [CaseProblem(c.y, c.W, geom, cfg, bank) for c in cases]
    vprobs = [CaseProblem(c.y, c.W, geom, cfg, bank) for c in val]
    x_tr = [c.x0 for c in cases]
    x_va = [c.x0 for c in val]
    layers, table = [], []
    hashes = {c.id: [] for c in cases}
    history = []
    prev_w = None
    for l in range(cfg.L):
        tcfg = replace(cfg.train_cfg, seed=cfg.seed * 1000 + l)
        init = prev_w if (cfg.denoiser_init == "previous" and prev_w is not None) else None
        try:
            with threadpool_limits(limits=1):
                w = dn.train(cfg.spec, init, [(x, c.x_star) for x, c in zip(x_tr, cases)], tcfg,
                             cfg.hu_window)
            w = w.stored()  # reconstruction runs on the saved float32 parameters
        except (dn.TrainingError, dn.ModelError) as e:
            raise LayerError(f"layer {l + 1}: {e}") from e
        prev_w = w

        def run(args, w=w, l=l):
            prob, x, cid = args
            try:
                return super_layer(prob, w, x)
            except solver.SolverDivergence as e:
                raise LayerError(f"layer {l + 1}, case {cid}: {e}") from e

        out = _map(run, [(p, x, c.id) for p, x, c in zip(probs, x_tr, cases)], threads)
        x_tr = [o[0] for o in out]
        for c, x in zip(cases, x_tr):
            hashes[c.id].append(image_hash(x))
        row = {"layer": l + 1, "train": _layer_metrics(x_tr, cases)}
        if val:
            vout = _map(run, [(p, x, c.id) for p, x, c in zip(vprobs, x_va, val)], threads)
            x_va = [o[0] for o in vout]
            row["val"] = _layer_metrics(x_va, val)
        table.append(row)
        layers.append(w)
        if keep_images:
            history.append(x_tr)
        log.info("layer %d: train RMSE %.3f HU", l + 1, row["train"]["rmse"])
    model = LayeredSuperModel(cfg, layers, geom, bank if cfg.effective()[0] == "ultra" else None,
                              table, hashes)
    return (model, history) if keep_images else model


def super_reconstruct(y, W, x0, model):
    """Run all L layers from x0; returns (final, per-layer images, per-layer traces)."""
    prob = CaseProblem(y, W, model.geometry, model.config, model.bank)
    x = np.asarray(x0, dtype=np.float64)
    images, traces = [], []
    with threadpool_limits(limits=1):
        for w in model.layers:
            x, tr = super_layer(prob, w, x)
            images.append(x)
            traces.append(tr)
    return x, images, traces


def evaluate_fixed_point_residual(y, W, model, x):
    """RMS change of x under one more layer that uses the last denoiser."""
    prob = CaseProblem(y, W, model.geometry, model.config, model.bank)
    with threadpool_limits(limits=1):
        out, _ = super_layer(prob, model.layers[-1], np.asarray(x, dtype=np.float64))
    return float(np.sqrt(np.mean((out - x) ** 2)))


def reconstruct_baseline(method, y, W, x0, geom, bank=None, params=None):
    """Standalone methods: fbp (returns x0), pwls-ep, pwls-ultra."""
    if method == "fbp":
        return np.asarray(x0, dtype=np.float64)
    op = get_projector(geom)
    yh = to_hu_domain(y)
    p = dict(DESK_BASELINES[method])
    p.update(params or {})
    kap = reg.kappa_map(op, W)
    with threadpool_limits(limits=1):
        if method == "pwls-ep":
            return solver.pwls_ep_baseline(yh, W, op, x0, p["beta"], p["delta"], p["iters"], kappa=kap)
        if method == "pwls-ultra":
            if bank is None:
                raise ValueError("pwls-ultra needs a transform bank")
            cfg = PatchConfig(bank.patch_cfg.patch_side, p.get("stride", 1))
            tau = reg.tau_weights(kap, cfg)
            return solver.pwls_ultra_baseline(yh, W, op, x0, bank, tau, p["beta"], p["gamma"],
                                              p["iters"], p["inner_iters"], cfg)
    raise ValueError(f"unknown baseline {method!r}")
