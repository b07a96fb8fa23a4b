"""Detection metrics: temporal IoU, per-class NMS, AP and mAP@tIoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TIOU_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)


@dataclass(frozen=True)
class Detection:
    seq_id: str
    cls: int
    score: float
    start: float
    end: float
    boundary_vars: tuple[float, float] | None = None


def tiou(a, b) -> float:
    """Temporal intersection over union of two (start, end) intervals."""
    s1, e1 = a
    s2, e2 = b
    if e1 <= s1 or e2 <= s2:
        raise ValueError("intervals must satisfy start < end")
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    return inter / union


def nms(detections: list[Detection], threshold: float) -> list[Detection]:
    """Greedy per-class, per-sequence suppression: keep the highest-scoring
    detection, drop others overlapping a kept one with tIoU >= threshold."""
    if not 0 < threshold <= 1:
        raise ValueError("nms threshold must be in (0, 1]")
    groups: dict[tuple[int, str], list[Detection]] = {}
    for det in detections:
        groups.setdefault((det.cls, det.seq_id), []).append(det)
    kept = []
    for key in groups:
        cand = sorted(groups[key], key=lambda d: -d.score)
        chosen: list[Detection] = []
        for det in cand:
            if all(tiou((det.start, det.end), (c.start, c.end)) < threshold for c in chosen):
                chosen.append(det)
        kept.extend(chosen)
    return kept


def average_precision(detections: list[Detection], ground_truths, threshold: float) -> float:
    """All-point area under the precision/recall sweep for one class.

    `ground_truths` is a list of (seq_id, start, end). Detections are visited
    in descending score order; each ground truth is matchable once, by the
    highest-tIoU unmatched candidate in the same sequence.
    """
    n_gt = len(ground_truths)
    if n_gt == 0:
        return 0.0
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    matched: set[int] = set()
    ap = 0.0
    tp = 0
    for rank, i in enumerate(order, start=1):
        det = detections[i]
        best_j, best_t = -1, 0.0
        for j, (seq_id, s, e) in enumerate(ground_truths):
            if j in matched or seq_id != det.seq_id:
                continue
            t = tiou((det.start, det.end), (s, e))
            if t > best_t:
                best_j, best_t = j, t
        if best_j >= 0 and best_t >= threshold:
            matched.add(best_j)
            tp += 1
            ap += tp / rank / n_gt
    return ap


def map_at_tious(
    detections: list[Detection],
    ground_truths,
    thresholds=TIOU_THRESHOLDS,
) -> tuple[dict[float, float], float]:
    """mAP per tIoU threshold plus the mean across thresholds.

    `ground_truths` is a list of (seq_id, class, start, end); the mean runs
    over the classes that have at least one ground truth.
    """
    classes = sorted({cls for _, cls, _, _ in ground_truths})
    if not classes:
        raise ValueError("no ground truths to evaluate against")
    by_class_gt = {c: [(sid, s, e) for sid, cls, s, e in ground_truths if cls == c] for c in classes}
    by_class_det = {c: [d for d in detections if d.cls == c] for c in classes}
    per_threshold = {}
    for thr in thresholds:
        aps = [average_precision(by_class_det[c], by_class_gt[c], thr) for c in classes]
        per_threshold[thr] = float(np.mean(aps))
    return per_threshold, float(np.mean(list(per_threshold.values())))
