"""Low-dose post-log sinogram simulation and statistical weights.

Images are stored in modified HU (air 0, water 1000). Attenuation is
``mu = x * HU_TO_MU`` per mm, so forward projections of an HU image times
``HU_TO_MU`` are unitless line integrals.
"""

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .tomo import forward_project

log = logging.getLogger(__name__)

MU_WATER = 0.0193  # 1/mm
HU_TO_MU = MU_WATER / 1000.0

# incident photon counts used in the experiments; electronic noise variance 25
DOSE_PRESETS = {"1e4": 1e4, "2e4": 2e4, "8e4": 8e4, "1e5": 1e5, "2e5": 2e5}


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DoseParams:
    I0: float = 1e4
    sigma2: float = 25.0
    epsilon: float = 0.1
    seed: int = 0
    weights: str = "poisson-gaussian"  # or "poisson": w = I0 exp(-y)

    def __post_init__(self):
        if self.I0 <= 0:
            raise ValueError("I0 must be positive")
        if self.epsilon <= 0 or self.epsilon >= self.I0:
            raise ValueError("need 0 < epsilon << I0")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be nonnegative")
        if self.weights not in ("poisson-gaussian", "poisson"):
            raise ValueError(f"unknown weight model {self.weights!r}")

    @classmethod
    def preset(cls, name, seed=0):
        return cls(I0=DOSE_PRESETS[name], sigma2=25.0, seed=seed)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def noisy_post_log(line_integrals, p):
    """Poisson-Gaussian counts clamped at epsilon, then -log(count / I0).

    Draws come from a Philox (counter-based) stream keyed by ``p.seed`` and
    consumed in ray-index order.
    """
    ell = np.asarray(line_integrals, dtype=np.float64)
    if np.any(ell < -1e-9):
        raise DataError("negative line integrals: check the HU-to-attenuation units")
    ell = np.maximum(ell, 0.0)
    rng = np.random.Generator(np.random.Philox(key=p.seed))
    counts = rng.poisson(p.I0 * np.exp(-ell)).astype(np.float64)
    if p.sigma2 > 0:
        counts += rng.normal(0.0, np.sqrt(p.sigma2), size=ell.shape)
    return -np.log(np.maximum(counts, p.epsilon) / p.I0)


def simulate_low_dose(ref_image, geom, p):
    """Low-dose post-log sinogram of an HU reference image."""
    ell = HU_TO_MU * forward_project(ref_image, geom)
    return noisy_post_log(ell, p)


def compute_weights(y, p):
    """Diagonal of W: delta-method inverse variance of the post-log data."""
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(over="ignore"):
        ybar = p.I0 * np.exp(-y)
    if p.weights == "poisson" or p.sigma2 == 0:
        return ybar
    return ybar ** 2 / (ybar + p.sigma2)


def to_hu_domain(y):
    """Post-log data rescaled to HU*mm, the units of the reconstruction data term."""
    return np.asarray(y, dtype=np.float64) / HU_TO_MU
