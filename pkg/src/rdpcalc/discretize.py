"""Grid discretization of continuous sources and the standard distortion/cost presets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .core import ConfigurationError, DiscreteSource, DistortionMatrix


@dataclass(frozen=True)
class GaussianSpec:
    mu: float = 0.0
    sigma: float = 2.0
    S: float = 8.0
    delta: float = 0.5

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigurationError("sigma must be positive")
        if not self.delta > 0:
            raise ConfigurationError("delta must be positive")
        if not self.S > 0:
            raise ConfigurationError("truncation half-width S must be positive")
        if self.delta > 2 * self.S:
            raise ConfigurationError("delta must not exceed 2S")

    @property
    def n_points(self) -> int:
        return int(round(2 * self.S / self.delta)) + 1

    def grid(self) -> np.ndarray:
        # centered on mu so the grid stays symmetric when 2S/delta is not an integer
        k = np.arange(self.n_points, dtype=float) - (self.n_points - 1) / 2
        return self.mu + k * self.delta


def _cell_mass(z_lo, z_hi):
    """``Phi(z_hi) - Phi(z_lo)`` for the standard normal, tail-accurate.

    Both endpoints are mapped onto the side of the origin where the
    complementary error function avoids cancellation.
    """
    z_lo = np.asarray(z_lo, dtype=float)
    z_hi = np.asarray(z_hi, dtype=float)
    s = np.sqrt(2.0)
    upper = erfc(z_lo / s) - erfc(z_hi / s)      # accurate when both >= 0
    lower = erfc(-z_hi / s) - erfc(-z_lo / s)    # accurate when both <= 0
    mixed = 2.0 - erfc(z_hi / s) - erfc(-z_lo / s)
    out = np.where(z_lo >= 0, upper, np.where(z_hi <= 0, lower, mixed))
    return 0.5 * out


def gaussian_cell_masses(spec: GaussianSpec) -> tuple[np.ndarray, np.ndarray]:
    """Grid points and unnormalized masses ``F(x + delta/2) - F(x - delta/2)``."""
    x = spec.grid()
    h = spec.delta / 2
    mass = _cell_mass((x - h - spec.mu) / spec.sigma, (x + h - spec.mu) / spec.sigma)
    return x, mass


def discretize_gaussian(spec: GaussianSpec) -> DiscreteSource:
    """Truncate to ``[mu - S, mu + S]``, grid with spacing ``delta``, renormalize.

    The mass outside the truncated cells is spread proportionally by the
    renormalization; :func:`truncated_tail_mass` reports how much that was.
    """
    x, mass = gaussian_cell_masses(spec)
    p = mass / mass.sum()
    # the grid is symmetric about mu; remove last-ulp asymmetry from erfc
    p = 0.5 * (p + p[::-1])
    return DiscreteSource(x, p)


def truncated_tail_mass(spec: GaussianSpec) -> float:
    _, mass = gaussian_cell_masses(spec)
    return float(1.0 - mass.sum())


def hamming_distortion(n: int) -> DistortionMatrix:
    if n < 2:
        raise ConfigurationError("Hamming distortion needs at least two letters")
    return DistortionMatrix(1.0 - np.eye(n))


def squared_error_matrix(points_src, points_rec) -> DistortionMatrix:
    x = np.asarray(points_src, dtype=float)
    y = np.asarray(points_rec, dtype=float)
    return DistortionMatrix((x[:, None] - y[None, :]) ** 2)
