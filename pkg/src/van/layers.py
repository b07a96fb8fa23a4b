"""Moment-propagating layers and their mean-only counterparts.

Forward rules for a diagonal-Gaussian input (m, v):

* linear:   m' = W^T m + b,   v' = (W o W)^T v
* relu:     m' = max(0, m),   v' = v where m >= 0, else 0
* l2norm:   m' = m / ||m||,   v' = v / ||m||^2

The mean-only functions are the baseline path; each ``*_moments`` variant
computes its means by calling the mean-only function, so the two paths agree
bitwise on the mean stream. Backward passes are the exact chain rule for
these formulas, including the mean-gradient contribution of the variance
outputs through ||m|| in the normalization layer.

Every function accepts a trailing feature axis with an optional leading
batch axis; parameter gradients are summed over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .moments import MomentVector, WeightMatrix, window_moments


@dataclass(frozen=True)
class PooledFeature:
    """Pooled proposal representation: (k+2) blocks of d dims each, ordered
    [context-before | part_1 ... part_k | context-after]."""

    moments: MomentVector
    k: int
    d: int

    def __post_init__(self):
        expect = (self.k + 2) * self.d
        if self.moments.means.shape[-1] != expect:
            raise ValueError(
                f"pooled length {self.moments.means.shape[-1]} != (k+2)*d = {expect}"
            )


@dataclass
class LinearTape:
    w: WeightMatrix
    x_means: np.ndarray
    x_variances: np.ndarray | None = None


@dataclass
class ReluTape:
    mask: np.ndarray


@dataclass
class L2NormTape:
    x_means: np.ndarray
    norm: np.ndarray  # keepdims along the feature axis
    x_variances: np.ndarray | None = None


def part_slices(n: int, k: int) -> list[tuple[int, int]]:
    """Split n units into k contiguous parts as evenly as possible.

    The remainder r goes one extra unit to the first r parts, so sizes are
    non-increasing and differ by at most one.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"cannot split {n} units into {k} parts")
    base, rem = divmod(n, k)
    out = []
    start = 0
    for i in range(k):
        size = base + (1 if i < rem else 0)
        out.append((start, start + size))
        start += size
    return out


def vap_pool(units: np.ndarray, k: int, ctx_before: int, ctx_after: int) -> PooledFeature:
    """Variance-aware pooling: per-block mean and population variance.

    `units` holds [ctx_before | proposal | ctx_after] rows; the proposal rows
    are split into k parts by `part_slices`. Empty context windows produce
    zero-mean, zero-variance blocks.
    """
    u = np.asarray(units, dtype=np.float64)
    if u.ndim != 2:
        raise ValueError("units must be a (T, d) matrix")
    t, d = u.shape
    if ctx_before < 0 or ctx_after < 0 or ctx_before + ctx_after > t:
        raise ValueError("context windows exceed the unit matrix")
    prop_len = t - ctx_before - ctx_after
    if prop_len < k:
        raise ValueError(f"proposal has {prop_len} units, fewer than k={k} parts")

    blocks_m = []
    blocks_v = []

    def add(block):
        if block.shape[0] == 0:
            blocks_m.append(np.zeros(d))
            blocks_v.append(np.zeros(d))
        else:
            m, v = window_moments(block)
            blocks_m.append(m)
            blocks_v.append(v)

    add(u[:ctx_before])
    prop = u[ctx_before : ctx_before + prop_len]
    for s, e in part_slices(prop_len, k):
        add(prop[s:e])
    add(u[t - ctx_after :] if ctx_after else u[:0])

    mv = MomentVector(np.concatenate(blocks_m), np.concatenate(blocks_v))
    return PooledFeature(mv, k=k, d=d)


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------

def linear_forward(w: WeightMatrix, x: np.ndarray) -> tuple[np.ndarray, LinearTape]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.rows:
        raise ValueError(f"input dim {x.shape[-1]} != weight rows {w.rows}")
    return x @ w.values + w.bias, LinearTape(w, x)


def linear_forward_moments(w: WeightMatrix, x: MomentVector) -> tuple[MomentVector, LinearTape]:
    means, tape = linear_forward(w, x.means)
    variances = x.variances @ (w.values**2)
    return MomentVector(means, variances), LinearTape(w, x.means, x.variances)


def _check_grad(tape_arr: np.ndarray, grad: np.ndarray, dim: int, what: str):
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != tape_arr.shape[:-1] + (dim,):
        raise RuntimeError(f"{what} gradient shape {grad.shape} does not match tape")
    return grad


def _sum_batch(a: np.ndarray) -> np.ndarray:
    return a.sum(axis=0) if a.ndim == 2 else a


def linear_backward(tape: LinearTape, grad_out) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad wrt input, grad wrt W, grad wrt bias)."""
    g = _check_grad(tape.x_means, grad_out, tape.w.cols, "linear output")
    x2 = np.atleast_2d(tape.x_means)
    g2 = np.atleast_2d(g)
    grad_w = x2.T @ g2
    grad_b = _sum_batch(g)
    grad_x = g @ tape.w.values.T
    return grad_x, grad_w, grad_b


def linear_backward_moments(
    tape: LinearTape, grad_means, grad_variances
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad in-means, grad in-variances, grad W, grad bias)."""
    if tape.x_variances is None:
        raise RuntimeError("tape was recorded by a mean-only forward")
    grad_x, grad_w, grad_b = linear_backward(tape, grad_means)
    gv = _check_grad(tape.x_variances, grad_variances, tape.w.cols, "linear variance")
    v2 = np.atleast_2d(tape.x_variances)
    gv2 = np.atleast_2d(gv)
    # v'_j = sum_i W_ij^2 v_i  =>  dW_ij += 2 W_ij v_i gv_j
    grad_w = grad_w + 2.0 * tape.w.values * (v2.T @ gv2)
    grad_xv = gv @ (tape.w.values**2).T
    return grad_x, grad_xv, grad_w, grad_b


# ---------------------------------------------------------------------------
# relu
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray) -> tuple[np.ndarray, ReluTape]:
    x = np.asarray(x, dtype=np.float64)
    mask = x >= 0
    return np.where(mask, x, 0.0), ReluTape(mask)


def relu_forward_moments(x: MomentVector) -> tuple[MomentVector, ReluTape]:
    means, tape = relu_forward(x.means)
    variances = np.where(tape.mask, x.variances, 0.0)
    return MomentVector(means, variances), tape


def relu_backward(tape: ReluTape, grad_out) -> np.ndarray:
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != tape.mask.shape:
        raise RuntimeError("relu gradient shape does not match tape")
    return np.where(tape.mask, g, 0.0)


def relu_backward_moments(tape: ReluTape, grad_means, grad_variances) -> tuple[np.ndarray, np.ndarray]:
    return relu_backward(tape, grad_means), relu_backward(tape, grad_variances)


# ---------------------------------------------------------------------------
# l2 normalization
# ---------------------------------------------------------------------------

def l2norm_forward(x: np.ndarray) -> tuple[np.ndarray, L2NormTape]:
    x = np.asarray(x, dtype=np.float64)
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("cannot normalize a zero-norm vector")
    return x / norm, L2NormTape(x, norm)


def l2norm_forward_moments(x: MomentVector) -> tuple[MomentVector, L2NormTape]:
    means, tape = l2norm_forward(x.means)
    variances = x.variances / tape.norm**2
    return MomentVector(means, variances), L2NormTape(x.means, tape.norm, x.variances)


def l2norm_backward(tape: L2NormTape, grad_out) -> np.ndarray:
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != tape.x_means.shape:
        raise RuntimeError("l2norm gradient shape does not match tape")
    m, n = tape.x_means, tape.norm
    dot = np.sum(g * m, axis=-1, keepdims=True)
    return g / n - m * dot / n**3


def l2norm_backward_moments(tape: L2NormTape, grad_means, grad_variances) -> tuple[np.ndarray, np.ndarray]:
    """Norm is a function of the means, so variance outputs feed the mean
    gradient through d(1/||m||^2)/dm = -2 m / ||m||^4."""
    if tape.x_variances is None:
        raise RuntimeError("tape was recorded by a mean-only forward")
    gm = l2norm_backward(tape, grad_means)
    gv = np.asarray(grad_variances, dtype=np.float64)
    if gv.shape != tape.x_variances.shape:
        raise RuntimeError("l2norm variance gradient shape does not match tape")
    m, n = tape.x_means, tape.norm
    vdot = np.sum(gv * tape.x_variances, axis=-1, keepdims=True)
    gm = gm - 2.0 * m * vdot / n**4
    return gm, gv / n**2
