"""The four second-stage architectures and their forward/backward passes.

All variants share the stack l2norm -> fc1 -> relu -> fc2 on the mean
stream; fc2 emits (C+1) blocks of [class logit, start offset, end offset],
class 0 being background. Differences:

* baseline  — means only.
* van_i     — input is means concatenated with variances (doubled fc1 rows).
* van_o     — extra head on the hidden layer predicts per-class (start, end)
              log variances, exponentiated to sigma_p^2 (train mode only).
* van_p     — means and variances propagated jointly through the moment
              layers in train mode; in test mode only means are propagated,
              identically to the baseline path.

Checkpoint format (see `save_checkpoint`): one container file whose header
stores {variant, d, k, hidden, classes, sigma_t2, seed}; parameter tensors
follow row-major in the fixed order fc1.values, fc1.bias, fc2.values,
fc2.bias, then var_head.values, var_head.bias for van_o. The order is stable
across versions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import container
from .layers import (
    L2NormTape,
    LinearTape,
    ReluTape,
    l2norm_forward,
    l2norm_forward_moments,
    linear_backward,
    linear_backward_moments,
    linear_forward,
    linear_forward_moments,
    relu_backward,
    relu_backward_moments,
    relu_forward,
    relu_forward_moments,
    PooledFeature,
)
from .losses import OutputGrads
from .moments import MomentVector, WeightMatrix, VARIANCE_FLOOR, clamp_variance

VARIANTS = ("baseline", "van_i", "van_o", "van_p")


@dataclass(frozen=True)
class NetworkConfig:
    variant: str
    d: int = 64
    k: int = 3
    hidden: int = 128
    classes: int = 5
    sigma_t2: float = 0.01

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if min(self.d, self.k, self.hidden, self.classes) < 1:
            raise ValueError("d, k, hidden and classes must all be >= 1")
        if self.sigma_t2 <= 0:
            raise ValueError("sigma_t2 must be positive")

    @property
    def pooled_dim(self) -> int:
        return (self.k + 2) * self.d

    @property
    def input_dim(self) -> int:
        return 2 * self.pooled_dim if self.variant == "van_i" else self.pooled_dim

    @property
    def out_dim(self) -> int:
        return (self.classes + 1) * 3


@dataclass
class NetworkParams:
    fc1: WeightMatrix
    fc2: WeightMatrix
    var_head: WeightMatrix | None = None


@dataclass
class ParamGrads:
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray
    var_head_w: np.ndarray | None = None
    var_head_b: np.ndarray | None = None


@dataclass
class DetectionResult:
    """Per-proposal outputs: class score means and per-class boundary
    Gaussians. boundary_var holds propagated/learned variances for van_p and
    van_o in train mode, and the fixed sigma_t^2 placeholder otherwise."""

    class_scores: np.ndarray  # (..., C+1)
    boundary_mean: np.ndarray  # (..., C+1, 2)
    boundary_var: np.ndarray  # (..., C+1, 2), always > 0


@dataclass
class NetTape:
    config: NetworkConfig
    mode: str
    norm_tape: L2NormTape
    fc1_tape: LinearTape
    relu_tape: ReluTape
    fc2_tape: LinearTape
    var_head_tape: LinearTape | None = None
    var_head_dexp: np.ndarray | None = None  # d boundary_var / d logvar
    vp_floor_mask: np.ndarray | None = None


def build(config: NetworkConfig, seed: int) -> NetworkParams:
    """Initialize parameters: weights ~ U(+-1/sqrt(fan_in)), biases zero.

    van_o's variance-head bias is warm-started just above log(sigma_t2) so
    the loss begins near the degenerate/L1 regime while the head still
    receives gradient.
    """
    rng = np.random.default_rng(seed)

    def uniform(rows, cols):
        limit = 1.0 / math.sqrt(rows)
        return rng.uniform(-limit, limit, size=(rows, cols))

    fc1 = WeightMatrix(uniform(config.input_dim, config.hidden), np.zeros(config.hidden))
    fc2 = WeightMatrix(uniform(config.hidden, config.out_dim), np.zeros(config.out_dim))
    var_head = None
    if config.variant == "van_o":
        head_cols = (config.classes + 1) * 2
        bias = np.full(head_cols, math.log(1.5 * config.sigma_t2))
        var_head = WeightMatrix(uniform(config.hidden, head_cols), bias)
    return NetworkParams(fc1, fc2, var_head)


def param_count(params: NetworkParams) -> int:
    return sum(arr.size for _, arr in param_arrays(params))


def param_arrays(params: NetworkParams) -> list[tuple[str, np.ndarray]]:
    """Named parameter tensors in checkpoint order."""
    out = [
        ("fc1.values", params.fc1.values),
        ("fc1.bias", params.fc1.bias),
        ("fc2.values", params.fc2.values),
        ("fc2.bias", params.fc2.bias),
    ]
    if params.var_head is not None:
        out.append(("var_head.values", params.var_head.values))
        out.append(("var_head.bias", params.var_head.bias))
    return out


def grad_arrays(grads: ParamGrads) -> list[tuple[str, np.ndarray]]:
    out = [
        ("fc1.values", grads.fc1_w),
        ("fc1.bias", grads.fc1_b),
        ("fc2.values", grads.fc2_w),
        ("fc2.bias", grads.fc2_b),
    ]
    if grads.var_head_w is not None:
        out.append(("var_head.values", grads.var_head_w))
        out.append(("var_head.bias", grads.var_head_b))
    return out


def flatten_params(params: NetworkParams) -> np.ndarray:
    return np.concatenate([a.ravel() for _, a in param_arrays(params)])


def params_from_vector(params: NetworkParams, vec: np.ndarray) -> NetworkParams:
    """Rebuild a NetworkParams with the same shapes from a flat vector."""
    vec = np.asarray(vec, dtype=np.float64)
    pieces = {}
    offset = 0
    for name, arr in param_arrays(params):
        pieces[name] = vec[offset : offset + arr.size].reshape(arr.shape)
        offset += arr.size
    if offset != vec.size:
        raise ValueError("parameter vector has the wrong length")
    var_head = None
    if params.var_head is not None:
        var_head = WeightMatrix(pieces["var_head.values"], pieces["var_head.bias"])
    return NetworkParams(
        WeightMatrix(pieces["fc1.values"], pieces["fc1.bias"]),
        WeightMatrix(pieces["fc2.values"], pieces["fc2.bias"]),
        var_head,
    )


def flatten_grads(grads: ParamGrads) -> np.ndarray:
    return np.concatenate([a.ravel() for _, a in grad_arrays(grads)])


def _validate_params(params: NetworkParams, config: NetworkConfig):
    if params.fc1.rows != config.input_dim or params.fc1.cols != config.hidden:
        raise ValueError("fc1 shape does not match the configuration")
    if params.fc2.rows != config.hidden or params.fc2.cols != config.out_dim:
        raise ValueError("fc2 shape does not match the configuration")
    if (config.variant == "van_o") != (params.var_head is not None):
        raise ValueError("var_head must be present exactly for van_o")


def forward(
    params: NetworkParams,
    config: NetworkConfig,
    feature: PooledFeature,
    mode: str = "train",
) -> tuple[DetectionResult, NetTape]:
    if mode not in ("train", "test"):
        raise ValueError(f"unknown mode {mode!r}")
    _validate_params(params, config)
    mom = feature.moments
    if mom.means.shape[-1] != config.pooled_dim:
        raise ValueError(
            f"pooled feature dim {mom.means.shape[-1]} != expected {config.pooled_dim}"
        )
    n_cls = config.classes + 1
    lead = mom.means.shape[:-1]

    var_head_tape = None
    var_head_dexp = None
    vp_floor_mask = None

    if config.variant == "van_p" and mode == "train":
        mv1, norm_tape = l2norm_forward_moments(mom)
        mv2, fc1_tape = linear_forward_moments(params.fc1, mv1)
        mv3, relu_tape = relu_forward_moments(mv2)
        mv4, fc2_tape = linear_forward_moments(params.fc2, mv3)
        y = mv4.means
        raw_var = mv4.variances.reshape(*lead, n_cls, 3)[..., 1:]
        boundary_var = clamp_variance(raw_var)
        vp_floor_mask = raw_var > VARIANCE_FLOOR
    else:
        x = mom.means
        if config.variant == "van_i":
            x = np.concatenate([mom.means, mom.variances], axis=-1)
        x1, norm_tape = l2norm_forward(x)
        h, fc1_tape = linear_forward(params.fc1, x1)
        a, relu_tape = relu_forward(h)
        y, fc2_tape = linear_forward(params.fc2, a)
        if config.variant == "van_o" and mode == "train":
            logvar, var_head_tape = linear_forward(params.var_head, a)
            raw_var = np.exp(logvar)
            boundary_var = clamp_variance(raw_var).reshape(*lead, n_cls, 2)
            var_head_dexp = np.where(raw_var > VARIANCE_FLOOR, raw_var, 0.0)
        else:
            boundary_var = np.full((*lead, n_cls, 2), config.sigma_t2)

    out = y.reshape(*lead, n_cls, 3)
    det = DetectionResult(out[..., 0], out[..., 1:], boundary_var)
    tape = NetTape(
        config, mode, norm_tape, fc1_tape, relu_tape, fc2_tape,
        var_head_tape, var_head_dexp, vp_floor_mask,
    )
    return det, tape


def backward(params: NetworkParams, config: NetworkConfig, tape: NetTape, grads: OutputGrads) -> ParamGrads:
    """Parameter gradients for the loss gradients in `grads`.

    For van_p the boundary-variance gradient flows through the variance
    stream into the squared-weight paths of both FC layers.
    """
    if tape.mode != "train":
        raise RuntimeError("backward requires a tape recorded in train mode")
    if tape.config != config:
        raise RuntimeError("tape does not match this configuration")
    n_cls = config.classes + 1
    d_scores = np.asarray(grads.d_class_scores, dtype=np.float64)
    lead = d_scores.shape[:-1]

    g_out = np.zeros((*lead, n_cls, 3))
    g_out[..., 0] = d_scores
    g_out[..., 1:] = grads.d_boundary_mean
    g_y = g_out.reshape(*lead, n_cls * 3)

    if config.variant == "van_p":
        g_vout = np.zeros((*lead, n_cls, 3))
        g_vout[..., 1:] = np.where(tape.vp_floor_mask, grads.d_boundary_var, 0.0)
        g_vy = g_vout.reshape(*lead, n_cls * 3)
        g_m3, g_v3, gw2, gb2 = linear_backward_moments(tape.fc2_tape, g_y, g_vy)
        g_m2, g_v2 = relu_backward_moments(tape.relu_tape, g_m3, g_v3)
        _, _, gw1, gb1 = linear_backward_moments(tape.fc1_tape, g_m2, g_v2)
        # pooling is not trainable, so the chain stops at fc1's input
        return ParamGrads(gw1, gb1, gw2, gb2)

    g_a, gw2, gb2 = linear_backward(tape.fc2_tape, g_y)
    gwv = gbv = None
    if config.variant == "van_o":
        g_logvar = grads.d_boundary_var.reshape(*lead, n_cls * 2) * tape.var_head_dexp
        g_a_head, gwv, gbv = linear_backward(tape.var_head_tape, g_logvar)
        g_a = g_a + g_a_head
    g_h = relu_backward(tape.relu_tape, g_a)
    _, gw1, gb1 = linear_backward(tape.fc1_tape, g_h)
    return ParamGrads(gw1, gb1, gw2, gb2, gwv, gbv)


def save_checkpoint(path, params: NetworkParams, config: NetworkConfig, seed: int) -> None:
    _validate_params(params, config)
    header = {
        "kind": "checkpoint",
        "format_version": 1,
        "variant": config.variant,
        "d": config.d,
        "k": config.k,
        "hidden": config.hidden,
        "classes": config.classes,
        "sigma_t2": config.sigma_t2,
        "seed": seed,
    }
    container.write_container(path, header, dict(param_arrays(params)))


def load_checkpoint(path) -> tuple[NetworkParams, NetworkConfig, int]:
    header, arrays = container.read_container(path)
    if header.get("kind") != "checkpoint":
        raise ValueError(f"{path}: not a checkpoint file")
    config = NetworkConfig(
        variant=header["variant"],
        d=header["d"],
        k=header["k"],
        hidden=header["hidden"],
        classes=header["classes"],
        sigma_t2=header["sigma_t2"],
    )
    var_head = None
    if "var_head.values" in arrays:
        var_head = WeightMatrix(arrays["var_head.values"], arrays["var_head.bias"])
    params = NetworkParams(
        WeightMatrix(arrays["fc1.values"], arrays["fc1.bias"]),
        WeightMatrix(arrays["fc2.values"], arrays["fc2.bias"]),
        var_head,
    )
    _validate_params(params, config)
    return params, config, header["seed"]
