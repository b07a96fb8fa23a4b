"""Classification and KL-based boundary regression losses.

The regression loss between a ground-truth Gaussian t ~ N(mu_t, sigma_t^2)
and a predicted Gaussian p ~ N(mu_p, sigma_p^2) is

    sqrt( log(sigma_p/sigma_t) + (sigma_t^2 + (mu_t - mu_p)^2) / (2 sigma_p^2) - 1/2 )

whenever sigma_p^2 > sigma_t^2, and degenerates to the scaled L1 form
|mu_t - mu_p| / sqrt(2 sigma_t^2) when the predicted variance is at or below
the ground-truth variance. The two branches meet continuously at
sigma_p^2 = sigma_t^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .moments import GaussianScalar


@dataclass(frozen=True)
class RegressionTarget:
    """Start/end boundary targets, both with the configured sigma_t^2."""

    start: GaussianScalar
    end: GaussianScalar

    def __post_init__(self):
        if self.start.sigma2 <= 0 or self.start.sigma2 != self.end.sigma2:
            raise ValueError("start/end targets must share one positive variance")


@dataclass(frozen=True)
class LossBreakdown:
    classification: float
    regression: float
    total: float
    lambda_reg: float


@dataclass
class OutputGrads:
    """Loss gradients with respect to a network's outputs."""

    d_class_scores: np.ndarray  # (..., C+1)
    d_boundary_mean: np.ndarray  # (..., C+1, 2)
    d_boundary_var: np.ndarray  # (..., C+1, 2)


def kl_gaussian(q: GaussianScalar, p: GaussianScalar) -> float:
    """Closed-form divergence log(sq/sp) + (sp^2 + (mq-mp)^2)/(2 sq^2) - 1/2.

    Always >= 0, zero iff q == p, and asymmetric in its arguments.
    """
    if q.sigma2 <= 0 or p.sigma2 <= 0:
        raise ValueError("kl_gaussian requires positive variances")
    return (
        0.5 * math.log(q.sigma2 / p.sigma2)
        + (p.sigma2 + (q.mu - p.mu) ** 2) / (2.0 * q.sigma2)
        - 0.5
    )


def _kl_loss_inner(target: GaussianScalar, pred: GaussianScalar) -> float:
    delta2 = (target.mu - pred.mu) ** 2
    return (
        0.5 * math.log(pred.sigma2 / target.sigma2)
        + (target.sigma2 + delta2) / (2.0 * pred.sigma2)
        - 0.5
    )


def kl_regression_loss(target: GaussianScalar, pred: GaussianScalar) -> float:
    """Boundary regression loss; scaled L1 when pred.sigma2 <= target.sigma2."""
    if target.sigma2 <= 0 or pred.sigma2 <= 0:
        raise ValueError("kl_regression_loss requires positive variances")
    if pred.sigma2 > target.sigma2:
        return math.sqrt(max(_kl_loss_inner(target, pred), 0.0))
    return abs(target.mu - pred.mu) / math.sqrt(2.0 * target.sigma2)


def kl_regression_loss_grad(target: GaussianScalar, pred: GaussianScalar) -> tuple[float, float]:
    """(d loss / d mu_p, d loss / d sigma_p^2).

    The degenerate branch has zero gradient in sigma_p^2 and the usual L1
    subgradient in mu_p (0 at the kink mu_p == mu_t).
    """
    if target.sigma2 <= 0 or pred.sigma2 <= 0:
        raise ValueError("kl_regression_loss_grad requires positive variances")
    st2, sp2 = target.sigma2, pred.sigma2
    if sp2 > st2:
        delta = target.mu - pred.mu
        loss = math.sqrt(max(_kl_loss_inner(target, pred), 0.0))
        if loss == 0.0:
            return 0.0, 0.0
        d_mu = (pred.mu - target.mu) / sp2 / (2.0 * loss)
        d_s2 = (0.5 / sp2 - (st2 + delta * delta) / (2.0 * sp2 * sp2)) / (2.0 * loss)
        return d_mu, d_s2
    diff = pred.mu - target.mu
    sign = 0.0 if diff == 0 else math.copysign(1.0, diff)
    return sign / math.sqrt(2.0 * st2), 0.0


def classification_loss(scores, label: int) -> float:
    """Softmax cross-entropy over C+1 classes (class 0 is background)."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ValueError("scores must be a vector")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if not 0 <= label < s.shape[0]:
        raise ValueError(f"label {label} out of range for {s.shape[0]} classes")
    m = s.max()
    lse = m + math.log(np.sum(np.exp(s - m)))
    return float(lse - s[label])


def classification_loss_grad(scores, label: int) -> np.ndarray:
    """softmax(scores) - onehot(label)."""
    s = np.asarray(scores, dtype=np.float64)
    if not 0 <= label < s.shape[0]:
        raise ValueError(f"label {label} out of range for {s.shape[0]} classes")
    e = np.exp(s - s.max())
    p = e / e.sum()
    p[label] -= 1.0
    return p


def combined_loss(det, label: int, target: RegressionTarget | None, lambda_reg: float) -> LossBreakdown:
    """Per-proposal objective: classification plus weighted boundary regression.

    Background proposals (label 0) carry no regression target and contribute
    classification loss only. Regression is evaluated on the labelled class's
    start and end heads and summed.
    """
    if (label == 0) != (target is None):
        raise ValueError("background proposals and only they must lack a target")
    cls = classification_loss(det.class_scores, label)
    reg = 0.0
    if target is not None:
        bm = det.boundary_mean[label]
        bv = det.boundary_var[label]
        reg += kl_regression_loss(target.start, GaussianScalar(float(bm[0]), float(bv[0])))
        reg += kl_regression_loss(target.end, GaussianScalar(float(bm[1]), float(bv[1])))
    return LossBreakdown(cls, reg, cls + lambda_reg * reg, lambda_reg)


def combined_loss_grad(det, label: int, target: RegressionTarget | None, lambda_reg: float) -> OutputGrads:
    """Gradients of `combined_loss` with respect to the network outputs."""
    if (label == 0) != (target is None):
        raise ValueError("background proposals and only they must lack a target")
    n_cls = det.class_scores.shape[-1]
    d_scores = classification_loss_grad(det.class_scores, label)
    d_bm = np.zeros((n_cls, 2))
    d_bv = np.zeros((n_cls, 2))
    if target is not None:
        bm = det.boundary_mean[label]
        bv = det.boundary_var[label]
        for j, tgt in enumerate((target.start, target.end)):
            d_mu, d_s2 = kl_regression_loss_grad(tgt, GaussianScalar(float(bm[j]), float(bv[j])))
            d_bm[label, j] = lambda_reg * d_mu
            d_bv[label, j] = lambda_reg * d_s2
    return OutputGrads(d_scores, d_bm, d_bv)
