"""Mini-batch SGD training and cascade-refinement inference."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset, Proposal, SyntheticSequence, featurize
from .evaluate import Detection, TIOU_THRESHOLDS, map_at_tious, nms
from .layers import PooledFeature
from .losses import (
    LossBreakdown,
    OutputGrads,
    RegressionTarget,
    combined_loss,
    combined_loss_grad,
)
from .moments import MomentVector
from .network import (
    DetectionResult,
    NetworkConfig,
    NetworkParams,
    backward,
    forward,
    grad_arrays,
    param_arrays,
)

OPTIMIZERS = ("sgd", "sgd-momentum")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 1e-3
    iters: int = 5000
    optimizer: str = "sgd-momentum"
    momentum: float = 0.9
    lambda_reg: float = 1.0
    seed: int = 0
    cascade_steps: int = 2

    def __post_init__(self):
        if self.batch_size < 1 or self.lr < 0 or self.iters < 0:
            raise ValueError("batch_size >= 1, lr >= 0 and iters >= 0 required")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class FeatureSet:
    """Featurized training proposals with labels/targets."""

    means: np.ndarray  # (n, pooled_dim)
    variances: np.ndarray
    labels: np.ndarray  # (n,) int
    targets: list[RegressionTarget | None]
    k: int
    d: int


def featurize_dataset(dataset: Dataset, k: int) -> FeatureSet:
    if not dataset.proposals:
        raise ValueError("dataset has no proposals")
    means, variances, labels, targets = [], [], [], []
    for prop in dataset.proposals:
        feat = featurize(dataset.sequence_by_id(prop.seq_id), prop, k)
        means.append(feat.moments.means)
        variances.append(feat.moments.variances)
        labels.append(prop.label)
        targets.append(prop.target)
    return FeatureSet(
        np.stack(means), np.stack(variances),
        np.array(labels, dtype=np.int64), targets,
        k=k, d=dataset.config.d,
    )


def batch_loss_and_grads(
    det: DetectionResult,
    labels,
    targets,
    lambda_reg: float,
) -> tuple[LossBreakdown, OutputGrads]:
    """Mean per-sample loss over a batch plus gradients wrt the outputs."""
    n = det.class_scores.shape[0]
    n_cls = det.class_scores.shape[-1]
    d_scores = np.zeros((n, n_cls))
    d_bm = np.zeros((n, n_cls, 2))
    d_bv = np.zeros((n, n_cls, 2))
    cls_sum = reg_sum = 0.0
    for i in range(n):
        single = DetectionResult(det.class_scores[i], det.boundary_mean[i], det.boundary_var[i])
        part = combined_loss(single, int(labels[i]), targets[i], lambda_reg)
        cls_sum += part.classification
        reg_sum += part.regression
        g = combined_loss_grad(single, int(labels[i]), targets[i], lambda_reg)
        d_scores[i] = g.d_class_scores / n
        d_bm[i] = g.d_boundary_mean / n
        d_bv[i] = g.d_boundary_var / n
    breakdown = LossBreakdown(
        cls_sum / n, reg_sum / n, (cls_sum + lambda_reg * reg_sum) / n, lambda_reg
    )
    return breakdown, OutputGrads(d_scores, d_bm, d_bv)


def train(
    params: NetworkParams,
    config: NetworkConfig,
    dataset: Dataset,
    tc: TrainConfig,
) -> tuple[NetworkParams, list[LossBreakdown]]:
    """Run mini-batch SGD in place; returns the params and per-iteration losses."""
    feats = featurize_dataset(dataset, config.k)
    n = feats.means.shape[0]
    rng = np.random.default_rng(tc.seed)
    order = rng.permutation(n)
    cursor = 0
    velocity = {name: np.zeros_like(arr) for name, arr in param_arrays(params)}
    curve: list[LossBreakdown] = []

    for it in range(tc.iters):
        if cursor + tc.batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + tc.batch_size] if tc.batch_size <= n else order
        cursor += tc.batch_size

        batch = PooledFeature(
            MomentVector(feats.means[idx], feats.variances[idx]), k=feats.k, d=feats.d
        )
        det, tape = forward(params, config, batch, mode="train")
        if not np.all(np.isfinite(det.class_scores)):
            raise TrainingDiverged(f"non-finite network outputs at iteration {it}")
        breakdown, out_grads = batch_loss_and_grads(
            det, feats.labels[idx], [feats.targets[i] for i in idx], tc.lambda_reg
        )
        if not math.isfinite(breakdown.total):
            raise TrainingDiverged(
                f"non-finite loss at iteration {it}: cls={breakdown.classification} "
                f"reg={breakdown.regression}"
            )
        curve.append(breakdown)

        grads = backward(params, config, tape, out_grads)
        named = dict(grad_arrays(grads))
        for name, arr in param_arrays(params):
            g = named[name]
            if tc.optimizer == "sgd-momentum":
                velocity[name] = tc.momentum * velocity[name] + g
                g = velocity[name]
            arr -= tc.lr * g
    return params, curve


def _int_window(start: float, end: float, t: int, k: int) -> tuple[int, int]:
    """Integer pooling window for refined float boundaries, at least k units."""
    s = int(round(start))
    e = int(round(end))
    s, e = max(0, min(s, t)), max(0, min(e, t))
    if e - s < k:
        e = min(t, s + k)
        s = max(0, e - k)
    return s, e


def cascade_infer(
    params: NetworkParams,
    config: NetworkConfig,
    sequence: SyntheticSequence,
    proposals: list[Proposal],
    steps: int = 2,
) -> list[Detection]:
    """Iterative test-time boundary refinement with shared parameters.

    Each step re-featurizes the current (refined) intervals, runs a test-mode
    forward pass, and moves the boundaries by the top-scoring non-background
    class's offsets scaled by the interval length. Boundaries never leave
    [0, T]. The final step's class and softmax score label the detection.
    """
    if steps < 1:
        raise ValueError("cascade needs at least one step")
    if not proposals:
        return []
    t = sequence.units.shape[0]
    bounds = np.array([(p.start, p.end) for p in proposals], dtype=np.float64)
    cls = np.zeros(len(proposals), dtype=np.int64)
    score = np.zeros(len(proposals))
    for _ in range(steps):
        feats = [
            featurize(sequence, Proposal(sequence.seq_id, *_int_window(s, e, t, config.k)), config.k)
            for s, e in bounds
        ]
        batch = PooledFeature(
            MomentVector(
                np.stack([f.moments.means for f in feats]),
                np.stack([f.moments.variances for f in feats]),
            ),
            k=config.k,
            d=config.d,
        )
        det, _ = forward(params, config, batch, mode="test")
        z = det.class_scores - det.class_scores.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        cls = 1 + np.argmax(p[:, 1:], axis=-1)
        score = p[np.arange(len(proposals)), cls]
        offsets = det.boundary_mean[np.arange(len(proposals)), cls]
        lengths = bounds[:, 1] - bounds[:, 0]
        bounds[:, 0] = np.clip(bounds[:, 0] + offsets[:, 0] * lengths, 0.0, t)
        bounds[:, 1] = np.clip(bounds[:, 1] + offsets[:, 1] * lengths, 0.0, t)
        short = bounds[:, 1] - bounds[:, 0] < 1.0
        if np.any(short):
            mid = np.clip(bounds[short].mean(axis=1), 0.5, t - 0.5)
            bounds[short, 0] = mid - 0.5
            bounds[short, 1] = mid + 0.5
    return [
        Detection(sequence.seq_id, int(c), float(sc), float(s), float(e))
        for c, sc, (s, e) in zip(cls, score, bounds)
    ]


def evaluate_dataset(
    params: NetworkParams,
    config: NetworkConfig,
    dataset: Dataset,
    steps: int = 2,
    nms_threshold: float = 0.5,
    thresholds=TIOU_THRESHOLDS,
) -> tuple[dict[float, float], float, list[Detection]]:
    """Cascade inference + NMS over a split, then mAP at each tIoU threshold."""
    props_by_seq: dict[str, list[Proposal]] = {}
    for p in dataset.proposals:
        props_by_seq.setdefault(p.seq_id, []).append(p)
    detections: list[Detection] = []
    for seq in dataset.sequences:
        dets = cascade_infer(params, config, seq, props_by_seq.get(seq.seq_id, []), steps)
        detections.extend(nms(dets, nms_threshold))
    ground_truths = [
        (seq.seq_id, cls, float(s), float(e))
        for seq in dataset.sequences
        for cls, s, e in seq.annotations
    ]
    per_thr, avg = map_at_tious(detections, ground_truths, thresholds)
    return per_thr, avg, detections
