"""COCO-style average precision over raw, suppression-free detections.

Every proposal becomes a detection (score = max class probability, label
= argmax); nothing is filtered beyond an optional score floor. Matching
is the standard greedy protocol per image and class; AP integrates the
right-monotone precision-recall curve at 101 recall points, and the
headline number averages class means over IoU thresholds 0.50:0.05:0.95.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .model import StageOutput

COCO_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))
RECALL_GRID = np.linspace(0.0, 1.0, 101)


@dataclass
class Detection:
    """One scored box prediction on one image (normalized center-size box)."""

    image_id: int
    label: int
    score: float
    box: np.ndarray


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def detections_from_stage(
    stage: StageOutput, image_ids, score_floor: float = 0.0
) -> list[list[Detection]]:
    """Turn one stage's raw outputs into per-image detection lists.

    Each proposal yields exactly one detection; lists are sorted by
    descending score (ties keep proposal order).
    """
    probs = _stable_sigmoid(stage.class_logits.data)  # (B, N, K)
    boxes = stage.boxes.data
    out = []
    for b, image_id in enumerate(image_ids):
        scores = probs[b].max(axis=1)
        labels = probs[b].argmax(axis=1)
        dets = [
            Detection(int(image_id), int(labels[n]), float(scores[n]), boxes[b, n].copy())
            for n in range(len(scores))
            if scores[n] >= score_floor
        ]
        dets.sort(key=lambda d: -d.score)
        out.append(dets)
    return out


def match_for_eval(dets, gt_labels, gt_boxes, iou_thresh: float):
    """Greedy TP/FP assignment for one image at one IoU threshold.

    Detections are visited in descending score order (stable, index
    tie-break); each matches the highest-IoU unmatched same-class ground
    truth at or above the threshold. Returns (scores, labels, tp_flags)
    arrays in that visiting order.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.intp)
    scores = np.array([dets[i].score for i in order])
    labels = np.array([dets[i].label for i in order], dtype=np.intp)
    flags = np.zeros(len(order), dtype=bool)
    if len(order) and len(gt_labels):
        det_xyxy = geometry.cxcywh_to_xyxy(np.stack([dets[i].box for i in order]))
        ious = geometry.pairwise_iou(det_xyxy, geometry.cxcywh_to_xyxy(gt_boxes))
        taken = np.zeros(len(gt_labels), dtype=bool)
        for d in range(len(order)):
            ok = (~taken) & (gt_labels == labels[d]) & (ious[d] >= iou_thresh)
            if ok.any():
                cand = np.where(ok, ious[d], -1.0)
                g = int(np.argmax(cand))  # first index wins ties
                taken[g] = True
                flags[d] = True
    return scores, labels, flags


def average_precision(scores, tp_flags, num_gt: int) -> float | None:
    """101-point interpolated AP from scored TP/FP flags.

    Returns None (class skipped) when there are neither ground truths nor
    detections; 0.0 when detections exist but no ground truth does.
    """
    scores = np.asarray(scores, dtype=np.float64)
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if num_gt == 0:
        return None if scores.size == 0 else 0.0
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(tp_flags[order])
    fp = np.cumsum(~tp_flags[order])
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    # Right-to-left maximum makes precision non-increasing in recall.
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    interp = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(interp.mean())


@dataclass
class MapReport:
    """Aggregated AP numbers: mean over .50:.05:.95, AP50, AP75, per class."""

    ap: float
    ap50: float
    ap75: float
    per_class: dict[int, dict[float, float]] = field(default_factory=dict)
    num_images: int = 0
    num_gt: int = 0

    def to_dict(self) -> dict:
        return {
            "AP": self.ap,
            "AP50": self.ap50,
            "AP75": self.ap75,
            "num_images": self.num_images,
            "num_gt": self.num_gt,
            "per_class": {
                str(k): {f"{t:.2f}": v for t, v in row.items()}
                for k, row in self.per_class.items()
            },
        }

    def format_table(self) -> str:
        lines = [
            f"{'metric':<10}{'value':>8}",
            f"{'AP':<10}{self.ap:>8.4f}",
            f"{'AP50':<10}{self.ap50:>8.4f}",
            f"{'AP75':<10}{self.ap75:>8.4f}",
        ]
        for k in sorted(self.per_class):
            row = self.per_class[k]
            mean_k = float(np.mean(list(row.values())))
            lines.append(f"{f'class {k}':<10}{mean_k:>8.4f}")
        return "\n".join(lines)


def map_report(per_image_dets, per_image_gts, thresholds=COCO_THRESHOLDS) -> MapReport:
    """Full evaluation: class-mean AP per threshold, then threshold means.

    ``per_image_dets`` is a list of detection lists; ``per_image_gts`` a
    list of (labels, boxes) pairs aligned with it.
    """
    classes = set()
    num_gt_per_class: dict[int, int] = {}
    for labels, _ in per_image_gts:
        for lab in np.asarray(labels).tolist():
            num_gt_per_class[int(lab)] = num_gt_per_class.get(int(lab), 0) + 1
            classes.add(int(lab))
    for dets in per_image_dets:
        classes.update(d.label for d in dets)

    per_class: dict[int, dict[float, float]] = {}
    for thresh in thresholds:
        pooled: dict[int, list[tuple[float, bool]]] = {c: [] for c in classes}
        for dets, (gt_labels, gt_boxes) in zip(per_image_dets, per_image_gts):
            scores, labels, flags = match_for_eval(dets, gt_labels, gt_boxes, thresh)
            for s, lab, fl in zip(scores, labels, flags):
                pooled[int(lab)].append((float(s), bool(fl)))
        for c in classes:
            entries = pooled[c]
            ap = average_precision(
                [s for s, _ in entries], [f for _, f in entries], num_gt_per_class.get(c, 0)
            )
            if ap is not None:
                per_class.setdefault(c, {})[float(thresh)] = ap

    def mean_at(thresh: float) -> float:
        vals = [row[thresh] for row in per_class.values() if thresh in row]
        return float(np.mean(vals)) if vals else 0.0

    threshold_means = [mean_at(float(t)) for t in thresholds]
    return MapReport(
        ap=float(np.mean(threshold_means)) if threshold_means else 0.0,
        ap50=mean_at(0.5),
        ap75=mean_at(0.75),
        per_class=per_class,
        num_images=len(per_image_dets),
        num_gt=sum(num_gt_per_class.values()),
    )


def recall_at_score(
    per_image_dets, per_image_gts, iou_thresh: float = 0.5, score_floor: float = 0.3
) -> float:
    """Fraction of ground-truth objects matched by a detection scoring
    at least ``score_floor`` (greedy, same-class, IoU >= threshold)."""
    matched = 0
    total = 0
    for dets, (gt_labels, gt_boxes) in zip(per_image_dets, per_image_gts):
        kept = [d for d in dets if d.score >= score_floor]
        _, _, flags = match_for_eval(kept, gt_labels, gt_boxes, iou_thresh)
        matched += int(flags.sum())
        total += len(np.asarray(gt_labels))
    return matched / total if total else 0.0
