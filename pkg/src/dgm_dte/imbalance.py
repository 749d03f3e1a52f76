"""Label-density estimation and inverse-sqrt-density embedding weights.

Rare delivery times get amplified representations: a Gaussian kernel density
is fitted over training labels and each sample's fused embedding is scaled by
density**-0.5 before the regression head.  Weights are plain constants; no
gradient flows through them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import Tape, Tensor

DENSITY_FLOOR = 1e-12


def silverman_bandwidth(y: np.ndarray, floor: float = 0.5) -> float:
    """Rule-of-thumb kernel width 1.06 * std * n^(-1/5), floored.

    The floor keeps degenerate label sets (one point, or many identical
    points) from collapsing the kernel to a spike.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("bandwidth: empty label set")
    return max(1.06 * y.std() * y.size ** (-0.2), floor)


@dataclass
class DensityModel:
    """Gaussian kernel density over a fixed point set."""

    points: np.ndarray
    bandwidth: float

    def pdf(self, x) -> np.ndarray:
        """Exact mixture density at arbitrary query points."""
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        z = (x[:, None] - self.points[None, :]) / self.bandwidth
        k = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
        return k.mean(axis=1) / self.bandwidth

    def grid(self, bin_hours: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
        """Density sampled on bin centres spanning the observed range."""
        lo = np.floor(self.points.min() / bin_hours) * bin_hours
        hi = np.ceil(self.points.max() / bin_hours) * bin_hours
        edges = np.arange(lo, hi + bin_hours, bin_hours)
        centers = (edges[:-1] + edges[1:]) / 2.0
        if centers.size == 0:
            centers = np.array([lo + bin_hours / 2.0])
        return centers, self.pdf(centers)


def fit_density(y: np.ndarray, bandwidth: float | None = None, floor: float = 0.5) -> DensityModel:
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("density: empty label set; skip re-weighting for this run")
    h = bandwidth if bandwidth is not None else silverman_bandwidth(y, floor=floor)
    if h <= 0:
        raise ValueError(f"density: bandwidth must be positive, got {h}")
    return DensityModel(points=y.copy(), bandwidth=float(h))


def density_weights(
    model: DensityModel, y: np.ndarray, normalize: bool = True
) -> tuple[np.ndarray, int]:
    """Inverse-sqrt-density weights for labels y, plus the clamp count.

    Densities below DENSITY_FLOOR are clamped (with a warning) before the
    power, so isolated labels cannot produce infinite weights.  With
    ``normalize`` the weights are rescaled to mean exactly one over y.
    """
    p = model.pdf(y)
    clamped = int((p < DENSITY_FLOOR).sum())
    if clamped:
        warnings.warn(
            f"density weights: clamped {clamped} of {p.size} densities below {DENSITY_FLOOR}",
            stacklevel=2,
        )
        p = np.maximum(p, DENSITY_FLOOR)
    w = p**-0.5
    if normalize:
        w = w / w.mean()
    return w, clamped


def reweight_embeddings(tape: Tape, e: Tensor, weights: np.ndarray) -> Tensor:
    """Scale each embedding row by its sample weight.

    Weights enter as constants, so gradients flow through ``e`` only.  Used at
    train time on the tail branch; evaluation always runs with weight one,
    which is the same as not calling this at all.
    """
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != e.data.shape[0]:
        raise ValueError(
            f"reweight: {w.shape[0]} weights for {e.data.shape[0]} embedding rows"
        )
    w_col = tape.constant(w[:, None])
    ones_row = tape.constant(np.ones((1, e.data.shape[1])))
    return tape.mul(e, tape.matmul(w_col, ones_row))
