"""Command-line front end: simulate, learn-transforms, train-super, reconstruct, report.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 training or
solver failure.
"""

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, containers, datasets, engine, metrics, solver, ultra
from . import denoiser as dn
from .dose import DOSE_PRESETS, DoseParams
from .tomo import FanBeamGeometry

log = logging.getLogger("superct")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_RUN = 0, 2, 3, 4
BASELINES = ("fbp", "pwls-ep", "pwls-ultra")
MODEL_METHODS = {
    "super-ep": dict(prior="ep", mode="super"),
    "super-ultra": dict(prior="ultra", mode="super"),
    "sequential": dict(mode="sequential"),
    "data-term-only": dict(mode="data-term-only"),
    "supervised-only": dict(mode="supervised-only"),
}
METHODS = BASELINES + tuple(MODEL_METHODS)


class ConfigError(ValueError):
    pass


class Config:
    """Experiment config: a JSON dict plus the directory its paths are relative to."""

    def __init__(self, data, base):
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        self.data = data
        self.base = Path(base)

    @classmethod
    def load(cls, path):
        if path is None:
            return cls({}, Path.cwd())
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as e:
            raise OSError(f"cannot read config {p}: {e.strerror}") from e
        try:
            return cls(json.loads(text), p.parent)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON: {e}") from e

    def get(self, key, default=None):
        return self.data.get(key, default)

    def path(self, key, default=None, required=True):
        v = self.data.get(key, default)
        if v is None:
            if required:
                raise ConfigError(f"config needs '{key}'")
            return None
        p = Path(v)
        return p if p.is_absolute() else self.base / p

    def out_dir(self, args):
        p = Path(args.out) if args.out else self.path("output_dir", "out")
        p.mkdir(parents=True, exist_ok=True)
        return p


def _geometry(cfg):
    g = cfg.get("geometry", "desk")
    if g == "desk":
        return FanBeamGeometry.desk()
    if g == "full":
        return FanBeamGeometry.full()
    if isinstance(g, dict):
        return FanBeamGeometry(**g)
    path = cfg.path("geometry")
    try:
        text = path.read_text()
    except OSError as e:
        raise OSError(f"cannot read geometry file {path}: {e.strerror}") from e
    return FanBeamGeometry.from_json(text)


def _dose(cfg):
    d = cfg.get("dose", "1e4")
    if isinstance(d, str):
        if d not in DOSE_PRESETS:
            raise ConfigError(f"unknown dose preset {d!r}")
        return DoseParams.preset(d)
    return DoseParams(**d)


def _manifest(cfg, args):
    p = Path(args.manifest) if getattr(args, "manifest", None) else cfg.path("manifest")
    if not p.exists():
        raise FileNotFoundError(f"manifest not found: {p}")
    return datasets.DatasetManifest.load(p)


def _seed(cfg, args):
    return int(args.seed) if args.seed is not None else int(cfg.get("seed", 0))


# ----------------------------------------------------------------------------
# commands


def cmd_simulate(cfg, args):
    geom = _geometry(cfg)
    ds = cfg.get("dataset", {})
    out = cfg.out_dir(args)
    ranges = datasets.PhantomRanges(**{k: tuple(v) if isinstance(v, list) else v
                                       for k, v in ds.get("phantom", {}).items()})
    if "import_dir" in ds:
        src = cfg.path("import_dir", ds["import_dir"])
        m = datasets.import_directory(src, geom, _dose(cfg), _seed(cfg, args), out)
    else:
        m = datasets.build_dataset(int(ds.get("n_train", 40)), int(ds.get("n_val", 5)),
                                   int(ds.get("n_test", 10)), geom, _dose(cfg),
                                   _seed(cfg, args), out, ranges)
    print(f"wrote {len(m.cases)} cases to {out / 'manifest.json'}")
    return m


def cmd_learn_transforms(cfg, args):
    m = _manifest(cfg, args)
    u = cfg.get("ultra", {})
    images = [c.x_star for c in m.load_cases(u.get("role", "train"))]
    if u.get("n_images"):
        images = images[:int(u["n_images"])]
    pc = ultra.PatchConfig(int(u.get("patch_side", 8)), int(u.get("stride", 1)))
    with threadpool_limits(limits=1):
        bank = ultra.learn_ultra(images, int(u.get("K", 5)), pc, int(u.get("iters", 30)),
                                 float(u.get("lambda0", 31.0)), float(u.get("eta", 20.0)),
                                 _seed(cfg, args))
    out = cfg.out_dir(args)
    bank.save(out / "bank.sprg")
    with open(out / "bank_objective.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective"])
        for i, v in enumerate(bank.objective_trace):
            w.writerow([i + 1, repr(v)])
    print(f"wrote {out / 'bank.sprg'} (K={bank.K}, m={bank.m})")
    return bank


def super_config(cfg, args, method):
    if method not in MODEL_METHODS:
        raise ConfigError(f"train-super needs a model method, one of {sorted(MODEL_METHODS)}")
    name = args.preset or cfg.get("preset") or ("desk-ultra" if method == "super-ultra" else "desk-ep")
    over = dict(cfg.get("super", {}))
    over.update(MODEL_METHODS[method])
    over.setdefault("seed", _seed(cfg, args))
    try:
        return engine.preset(name, **over)
    except (KeyError, TypeError) as e:
        raise ConfigError(str(e)) from e


def _bank(cfg, args, required):
    p = Path(args.bank) if getattr(args, "bank", None) else cfg.path("bank", required=required)
    if p is None:
        return None
    if not p.exists():
        raise FileNotFoundError(f"transform bank not found: {p}")
    return ultra.TransformBank.load(p)


def cmd_train_super(cfg, args):
    method = args.method or cfg.get("method", "super-ep")
    scfg = super_config(cfg, args, method)
    m = _manifest(cfg, args)
    bank = _bank(cfg, args, required=scfg.effective()[0] == "ultra")
    model = engine.super_train(m.load_cases("train"), m.load_cases("val"), scfg, m.geometry(),
                               bank, threads=args.threads)
    out = cfg.out_dir(args)
    mdir = model.save(out / "model")
    with open(out / "layer_metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "split", "rmse", "snr", "ssim"])
        for row in model.metrics:
            for split in ("train", "val"):
                if split in row:
                    r = row[split]
                    w.writerow([row["layer"], split, repr(r["rmse"]), repr(r["snr"]), repr(r["ssim"])])
    print(f"wrote model with {model.L} layers to {mdir}")
    return model


def _metric_row(case, method, layer, x):
    x32 = np.asarray(x, dtype=np.float32).astype(np.float64)  # metrics of the stored image
    return {"case_id": case.id, "method": method, "layer": layer, **metrics.evaluate(x32, case.x_star)}


def cmd_reconstruct(cfg, args):
    method = args.method or cfg.get("method", "fbp")
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    m = _manifest(cfg, args)
    geom = m.geometry()
    cases = m.load_cases(cfg.get("split", "test"))
    out = cfg.out_dir(args)
    (out / "recon").mkdir(exist_ok=True)
    model = None
    if method in MODEL_METHODS:
        mp = Path(args.model) if args.model else cfg.path("model", required=False)
        if mp is None:
            raise ConfigError(f"method {method} needs a trained model")
        if not (mp / "manifest.json").exists():
            raise FileNotFoundError(f"model not found: {mp}")
        model = engine.LayeredSuperModel.load(mp)
        want = MODEL_METHODS[method]
        got = {k: getattr(model.config, k) for k in want}
        if got != want:
            raise ConfigError(f"model at {mp} was trained as {got}, not {method}")
        if model.geometry != geom:
            raise ConfigError("model geometry does not match the dataset geometry")
    bank = _bank(cfg, args, required=True) if method == "pwls-ultra" else None
    params = cfg.get("baseline", {}).get(method)

    def run(case):
        if model is None:
            with threadpool_limits(limits=1):
                x = engine.reconstruct_baseline(method, case.y, case.W, case.x0, geom, bank, params)
            return x, []
        x, layers, _ = engine.super_reconstruct(case.y, case.W, case.x0, model)
        return x, layers

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as ex:
            results = list(ex.map(run, cases))
    else:
        results = [run(c) for c in cases]

    rows = []
    for case, (x, layers) in zip(cases, results):
        containers.write_image(out / "recon" / f"{case.id}.sprg", x, geom.pixel_size_mm)
        if layers:
            for l, xl in enumerate(layers):
                rows.append(_metric_row(case, method, l + 1, xl))
        else:
            rows.append(_metric_row(case, method, 0, x))
        if args.dump_layers and layers:
            d = out / "layers" / case.id
            d.mkdir(parents=True, exist_ok=True)
            for l, xl in enumerate(layers):
                containers.write_image(d / f"layer_{l + 1:02d}.sprg", xl, geom.pixel_size_mm)
    metrics.write_metrics_csv(out / "metrics.csv", rows)
    print(f"reconstructed {len(cases)} cases with {method}; metrics in {out / 'metrics.csv'}")
    return rows


def cmd_report(cfg, args):
    paths = [Path(p) for p in (args.inputs or cfg.get("metrics", []))]
    if not paths:
        raise ConfigError("report needs at least one metrics CSV")
    rows = []
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"metrics file not found: {p}")
        try:
            rows += metrics.read_metrics_csv(p)
        except ValueError as e:
            raise ConfigError(str(e)) from e
    if not rows:
        raise ConfigError("metrics CSVs contain no rows")
    summary = metrics.summarize(rows)
    out = cfg.out_dir(args)
    metrics.write_summary(out / "summary.json", summary)
    if not args.no_figures:
        from . import plots
        for k in ("rmse", "snr", "ssim"):
            plots.metric_boxplot(rows, k, out / f"{k}_box.png")
        plots.layer_curves(rows, "rmse", out / "rmse_layers.png")
    print(f"wrote {out / 'summary.json'}")
    return summary


COMMANDS = {
    "simulate": cmd_simulate,
    "learn-transforms": cmd_learn_transforms,
    "train-super": cmd_train_super,
    "reconstruct": cmd_reconstruct,
    "report": cmd_report,
}


def build_parser():
    p = argparse.ArgumentParser(prog="superct", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="experiment JSON config")
        s.add_argument("--out", help="output directory (overrides output_dir)")
        s.add_argument("--seed", type=int)
        s.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        s.add_argument("--preset", choices=sorted(engine.PRESETS))
        s.add_argument("-v", "--verbose", action="store_true")
        if name != "simulate" and name != "report":
            s.add_argument("--manifest")
        if name in ("train-super", "reconstruct"):
            s.add_argument("--method", choices=METHODS)
            s.add_argument("--bank")
        if name == "reconstruct":
            s.add_argument("--model")
            s.add_argument("--dump-layers", action="store_true")
        if name == "report":
            s.add_argument("inputs", nargs="*", help="metrics CSV files")
            s.add_argument("--no-figures", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = Config.load(args.config)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, KeyError, TypeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (engine.LayerError, solver.SolverDivergence, dn.TrainingError) as e:
        print(f"run error: {e}", file=sys.stderr)
        return EXIT_RUN
    except (OSError, containers.ContainerError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
