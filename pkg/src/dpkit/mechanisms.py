"""Input-perturbation mechanisms (element-wise Laplace noise)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LaplaceParams:
    epsilon: float
    sensitivity: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"invalid params: epsilon must be positive, got {self.epsilon}")
        if not (self.sensitivity > 0 and math.isfinite(self.sensitivity)):
            raise ValueError(f"invalid params: sensitivity must be positive, got {self.sensitivity}")

    @property
    def scale(self) -> float:
        """Laplace scale b = sensitivity / epsilon (0 when epsilon is infinite)."""
        return self.sensitivity / self.epsilon


def laplace_inverse_cdf(u, b: float):
    """Map u in (-1/2, 1/2) to a Laplace(0, b) variate: ``-b sign(u) ln(1 - 2|u|)``."""
    if b < 0:
        raise ValueError(f"invalid scale {b}: must be nonnegative")
    u = np.asarray(u, dtype=np.float64)
    return -b * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def sample_laplace(b: float, rng: np.random.Generator, size=None):
    """Laplace(0, b) draws by inverse-CDF sampling."""
    if b < 0:
        raise ValueError(f"invalid scale {b}: must be nonnegative")
    u = rng.random(size) - 0.5
    # rng.random can return exactly 0, i.e. u = -1/2, where the log diverges
    u = np.maximum(u, np.nextafter(-0.5, 0.0))
    out = laplace_inverse_cdf(u, b)
    return float(out) if size is None else out


def laplace_perturb(data, params: LaplaceParams, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. Laplace(0, sensitivity/epsilon) noise to every element; no clamping."""
    data = np.asarray(data, dtype=np.float64)
    b = params.scale
    if b == 0:
        return data.copy()
    return data + sample_laplace(b, rng, data.shape)


def laplace_cdf(x, b: float):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x < 0, 0.5 * np.exp(x / b), 1.0 - 0.5 * np.exp(-x / b))
