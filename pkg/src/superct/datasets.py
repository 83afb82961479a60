"""Synthetic phantoms, paired training cases and on-disk datasets."""

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import containers
from .dose import HU_TO_MU, DoseParams, compute_weights, simulate_low_dose
from .tomo import FanBeamGeometry, fbp

log = logging.getLogger(__name__)

# (value, semi-axis x, semi-axis y, centre x, centre y, rotation deg) on [-1, 1]^2
SHEPP_LOGAN = (
    (2.00, 0.6900, 0.9200, 0.00, 0.0000, 0.0),
    (-0.98, 0.6624, 0.8740, 0.00, -0.0184, 0.0),
    (-0.02, 0.1100, 0.3100, 0.22, 0.0000, -18.0),
    (-0.02, 0.1600, 0.4100, -0.22, 0.0000, 18.0),
    (0.01, 0.2100, 0.2500, 0.00, 0.3500, 0.0),
    (0.01, 0.0460, 0.0460, 0.00, 0.1000, 0.0),
    (0.01, 0.0460, 0.0460, 0.00, -0.1000, 0.0),
    (0.01, 0.0460, 0.0230, -0.08, -0.6050, 0.0),
    (0.01, 0.0230, 0.0230, 0.00, -0.6060, 0.0),
    (0.01, 0.0230, 0.0460, 0.06, -0.6050, 0.0),
)
SHEPP_LOGAN_HU_SCALE = 1000.0


def ellipse_sum(ellipses, x, y, background=0.0):
    """Evaluate a sum of filled ellipses at points (x, y) in normalized coordinates."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.full(np.broadcast(x, y).shape, float(background))
    for val, a, b, cx, cy, deg in ellipses:
        t = math.radians(deg)
        dx, dy = x - cx, y - cy
        u = dx * math.cos(t) + dy * math.sin(t)
        v = -dx * math.sin(t) + dy * math.cos(t)
        out += val * ((u / a) ** 2 + (v / b) ** 2 <= 1.0)
    return out


def pixel_grid(n):
    """Normalized pixel-centre coordinates (x right, y up) of an n x n image."""
    c = (np.arange(n) - (n - 1) / 2) / (n / 2)
    return np.meshgrid(c, -c)


def render(ellipses, n, supersample=4, background=0.0):
    """Pixel-area average of an ellipse sum on a ``supersample^2`` subgrid."""
    X, Y = pixel_grid(n * supersample)
    img = ellipse_sum(ellipses, X, Y, background)
    return img.reshape(n, supersample, n, supersample).mean(axis=(1, 3))


def shepp_logan(n, supersample=4):
    """Canonical 10-ellipse Shepp-Logan phantom in modified HU (skull 2000)."""
    if n < 16:
        raise ValueError("n must be >= 16")
    ell = [(e[0] * SHEPP_LOGAN_HU_SCALE,) + tuple(e[1:]) for e in SHEPP_LOGAN]
    return render(ell, n, supersample)


@dataclass(frozen=True)
class PhantomRanges:
    n_inner: tuple = (3, 8)
    body_hu: tuple = (950.0, 1050.0)
    body_axes: tuple = (0.55, 0.85)
    inner_axes: tuple = (0.04, 0.25)
    contrast_hu: tuple = (-120.0, 120.0)
    bone_prob: float = 0.3
    bone_hu: tuple = (500.0, 900.0)
    hu_range: tuple = (0.0, 2500.0)


def random_phantom(n, seed, ranges=PhantomRanges(), supersample=4):
    """Seeded random ellipse phantom: a water-like body with inner structures."""
    rng = np.random.default_rng(seed)
    u = lambda lo_hi: rng.uniform(*lo_hi)
    ax, ay = u(ranges.body_axes), u(ranges.body_axes)
    rot = rng.uniform(-30, 30)
    ells = [(u(ranges.body_hu), ax, ay, 0.0, 0.0, rot)]
    k = rng.integers(ranges.n_inner[0], ranges.n_inner[1] + 1)
    for _ in range(k):
        a, b = u(ranges.inner_axes), u(ranges.inner_axes)
        # keep the structure inside the body
        r = rng.uniform(0, 1) * (min(ax, ay) - max(a, b)) * 0.9
        phi = rng.uniform(0, 2 * math.pi)
        val = u(ranges.bone_hu) if rng.random() < ranges.bone_prob else u(ranges.contrast_hu)
        ells.append((val, a, b, r * math.cos(phi), r * math.sin(phi), rng.uniform(0, 180)))
    return np.clip(render(ells, n, supersample), *ranges.hu_range)


@dataclass
class TrainingCase:
    id: str
    y: np.ndarray        # post-log sinogram
    W: np.ndarray        # statistical weights
    x0: np.ndarray       # FBP initial image (HU)
    x_star: np.ndarray   # reference image (HU)


def make_case(case_id, x_star, geom, dose):
    y = simulate_low_dose(x_star, geom, dose)
    w = compute_weights(y, dose)
    x0 = fbp(y, geom, "hann") / HU_TO_MU
    return TrainingCase(case_id, y, w, x0, np.asarray(x_star, dtype=np.float64))


def _round32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def write_case(case, root, geom):
    d = Path(root) / "cases" / case.id
    d.mkdir(parents=True, exist_ok=True)
    files = {
        "x_star": containers.write_image(d / "ref.sprg", case.x_star, geom.pixel_size_mm),
        "x0": containers.write_image(d / "fbp.sprg", case.x0, geom.pixel_size_mm),
        "y": containers.write_sinogram(d / "sino.sprg", case.y, geom.det_spacing_mm),
        "W": containers.write_sinogram(d / "weights.sprg", case.W, geom.det_spacing_mm,
                                       units="1/variance", kind="weights"),
    }
    return {k: str(v.relative_to(root)) for k, v in files.items()}


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class DatasetManifest:
    cases: list                     # dicts {id, role, files}
    dose: dict
    geometry_file: str
    seed: int
    root: str = field(default=".", repr=False)

    def ids(self, role):
        return [c["id"] for c in self.cases if c["role"] == role]

    def to_dict(self):
        d = asdict(self)
        d.pop("root")
        return d

    def content_hash(self):
        """Hash of the manifest plus every referenced file's bytes."""
        h = hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode())
        for c in self.cases:
            for rel in sorted(c["files"].values()):
                h.update(file_sha256(Path(self.root) / rel).encode())
        return h.hexdigest()

    def write(self, path):
        d = self.to_dict()
        d["hash"] = self.content_hash()
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        path = Path(path)
        d = json.loads(path.read_text())
        d.pop("hash", None)
        m = cls(**d, root=str(path.parent))
        roles = {}
        for c in m.cases:
            if c["id"] in roles:
                raise ValueError(f"case {c['id']} appears in two splits")
            roles[c["id"]] = c["role"]
        return m

    def geometry(self):
        return FanBeamGeometry.from_json((Path(self.root) / self.geometry_file).read_text())

    def load_cases(self, role):
        out = []
        for c in self.cases:
            if c["role"] != role:
                continue
            f = {k: Path(self.root) / v for k, v in c["files"].items()}
            out.append(TrainingCase(
                c["id"],
                y=containers.read_array(f["y"], "sinogram"),
                W=containers.read_array(f["W"], "weights"),
                x0=containers.read_array(f["x0"], "image"),
                x_star=containers.read_array(f["x_star"], "image"),
            ))
        return out


def build_dataset(n_train, n_val, n_test, geom, dose, seed, out_dir, ranges=PhantomRanges()):
    """Generate phantoms, simulate low-dose data and write cases plus manifest."""
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("every split needs at least one case")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "geometry.json").write_text(geom.to_json())
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(n_train + n_val + n_test)
    roles = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    entries = []
    for i, (role, child) in enumerate(zip(roles, children)):
        pseed, dseed = (int(s) for s in child.generate_state(2))
        x_star = random_phantom(geom.image_rows, pseed, ranges)
        case_dose = DoseParams(**{**asdict(dose), "seed": dseed})
        case = make_case(f"{role}_{i:03d}", _round32(x_star), geom, case_dose)
        files = write_case(case, out, geom)
        entries.append({"id": case.id, "role": role, "files": files})
        log.info("wrote case %s", case.id)
    m = DatasetManifest(entries, asdict(dose), "geometry.json", int(seed), root=str(out))
    m.write(out / "manifest.json")
    return m


def import_directory(src_dir, geom, dose, seed, out_dir):
    """Map ``<name>.raw`` float32 HU images with ``<name>.json`` sidecars into a dataset.

    A sidecar holds ``{"rows": .., "cols": .., "role": "train"|"val"|"test"}``.
    """
    src, out = Path(src_dir), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "geometry.json").write_text(geom.to_json())
    entries = []
    ss = np.random.SeedSequence(seed)
    sidecars = sorted(src.glob("*.json"))
    for side, child in zip(sidecars, ss.spawn(len(sidecars))):
        meta = json.loads(side.read_text())
        raw = np.fromfile(side.with_suffix(".raw"), dtype="<f4")
        img = raw.reshape(meta["rows"], meta["cols"]).astype(np.float64)
        if img.shape != geom.image_shape:
            raise ValueError(f"{side}: image {img.shape} does not match geometry {geom.image_shape}")
        case_dose = DoseParams(**{**asdict(dose), "seed": int(child.generate_state(1)[0])})
        case = make_case(side.stem, img, geom, case_dose)
        entries.append({"id": case.id, "role": meta.get("role", "train"),
                        "files": write_case(case, out, geom)})
    m = DatasetManifest(entries, asdict(dose), "geometry.json", int(seed), root=str(out))
    m.write(out / "manifest.json")
    return m
