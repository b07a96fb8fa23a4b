"""Core Gaussian-moment types and elementary kernels.

All arithmetic is float64. "Variance" always means sigma^2; standard
deviations appear only inside loss formulas that explicitly use them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: Floor applied to variances that feed a division (loss denominators,
#: detection outputs). Elementary kernels still return exact zeros.
VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class GaussianScalar:
    """A single (mu, sigma^2) pair.

    sigma2 may be 0 for degenerate windows (single-unit pooling bins);
    operations that divide by sigma2 reject non-positive values themselves.
    """

    mu: float
    sigma2: float

    def __post_init__(self):
        if not np.isfinite(self.mu) or not np.isfinite(self.sigma2):
            raise ValueError("GaussianScalar fields must be finite")
        if self.sigma2 < 0:
            raise ValueError(f"negative variance: {self.sigma2}")


@dataclass(frozen=True)
class MomentVector:
    """Paired per-dimension means and variances.

    The trailing axis is the feature axis; an optional leading axis holds a
    batch of independent vectors. Means and variances always have identical
    shape and variances are non-negative.
    """

    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.means, dtype=np.float64)
        v = np.asarray(self.variances, dtype=np.float64)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)
        if m.shape != v.shape:
            raise ValueError(f"means shape {m.shape} != variances shape {v.shape}")
        if v.size and float(v.min()) < 0:
            raise ValueError("negative variance in MomentVector")

    def __len__(self) -> int:
        return self.means.shape[-1]


@dataclass(frozen=True)
class WeightMatrix:
    """Dense layer weights: values has rows = input dim, cols = output dim."""

    values: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.values, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        object.__setattr__(self, "values", w)
        object.__setattr__(self, "bias", b)
        if w.ndim != 2:
            raise ValueError("weight values must be a matrix")
        if b.shape != (w.shape[1],):
            raise ValueError(f"bias shape {b.shape} does not match {w.shape[1]} columns")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("weights must be finite")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def window_moments(units: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean and population variance of a (window, dim) block."""
    u = np.asarray(units, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] == 0:
        raise ValueError("window must be a non-empty 2-D block")
    means = u.mean(axis=0)
    variances = np.mean((u - means) ** 2, axis=0)
    return means, variances


def mean_var_of_window(values) -> GaussianScalar:
    """Mean and population variance (divide by n) of a 1-D window.

    A single-element window has variance exactly 0.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("window must be a non-empty 1-D vector")
    means, variances = window_moments(x[:, None])
    return GaussianScalar(float(means[0]), float(variances[0]))


def elementwise_square(w: WeightMatrix) -> WeightMatrix:
    """Entry-wise square of the weights; the bias is zeroed (adds no variance)."""
    return WeightMatrix(w.values**2, np.zeros_like(w.bias))


def clamp_variance(v, floor: float = VARIANCE_FLOOR) -> np.ndarray:
    """Raise every entry to at least `floor` (absorbs round-off before divisions)."""
    if floor < 0:
        raise ValueError("variance floor must be non-negative")
    return np.maximum(np.asarray(v, dtype=np.float64), floor)
