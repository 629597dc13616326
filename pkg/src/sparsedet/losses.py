"""Focal, L1, and GIoU loss terms and the per-stage set loss.

Each stage of the detector is supervised independently: its predictions
are matched one-to-one against the ground truth by
:func:`sparsedet.matching.hungarian`, and the three loss terms are
evaluated only on the matched pairs (unmatched proposals contribute the
negative focal terms). Every term is divided by the total number of
ground-truth objects in the batch, with a floor of one for all-background
batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry, matching
from .autodiff import Tensor
from .matching import MatchResult

PROB_EPS = 1e-8


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


@dataclass
class LossBreakdown:
    """Total set loss plus its unweighted components.

    ``cls``/``l1``/``giou`` are sums over stages; ``per_stage`` holds the
    same three components stage by stage. The invariant
    ``total == lambda_cls*cls + lambda_l1*l1 + lambda_giou*giou`` holds by
    construction.
    """

    total: Tensor
    cls: float = 0.0
    l1: float = 0.0
    giou: float = 0.0
    per_stage: list[tuple[float, float, float]] = field(default_factory=list)
    num_objects: int = 0
    empty_batch: bool = False


def focal_loss(
    class_logits: Tensor,
    matched: MatchResult,
    gt_labels: np.ndarray,
    alpha: float = 0.25,
    gamma: float = 2.0,
    num_objects: int | None = None,
) -> Tensor:
    """Per-class sigmoid focal loss over an (N, K) logit matrix.

    The matched (proposal, label) entries are positives; every other
    entry is a negative. The sum is divided by ``num_objects`` (defaults
    to the number of matched pairs, floored at one).
    """
    class_logits = ad.as_tensor(class_logits)
    n, k = class_logits.shape
    target = np.zeros((n, k), dtype=np.float64)
    gt_labels = np.asarray(gt_labels, dtype=np.intp)
    for g, p in matched.assignment:
        target[p, gt_labels[g]] = 1.0
    if num_objects is None:
        num_objects = len(matched.assignment)
    denom = float(max(num_objects, 1))

    prob = ad.clamp(ad.sigmoid(class_logits), PROB_EPS, 1.0 - PROB_EPS)
    pos = ad.log(prob) * ad.power(1.0 - prob, gamma)
    neg = ad.log(1.0 - prob) * ad.power(prob, gamma)
    loss = (pos * (-alpha * target) + neg * (-(1.0 - alpha) * (1.0 - target))).sum()
    return loss * (1.0 / denom)


def _gather_matched(pred_boxes: Tensor, matched: MatchResult, gt_boxes: np.ndarray):
    idx = matched.proposal_indices
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)[matched.gt_indices]
    return ad.gather_rows(pred_boxes, idx), gt


def l1_box_loss(
    pred_boxes: Tensor,
    matched: MatchResult,
    gt_boxes: np.ndarray,
    num_objects: int | None = None,
) -> Tensor:
    """Sum of L1 distances between matched normalized center-size boxes."""
    pred_boxes = ad.as_tensor(pred_boxes)
    if num_objects is None:
        num_objects = len(matched.assignment)
    denom = float(max(num_objects, 1))
    if not matched.assignment:
        return pred_boxes.sum() * 0.0
    pred, gt = _gather_matched(pred_boxes, matched, gt_boxes)
    return ad.absolute(pred - gt).sum() * (1.0 / denom)


def giou_loss(
    pred_boxes: Tensor,
    matched: MatchResult,
    gt_boxes: np.ndarray,
    num_objects: int | None = None,
) -> Tensor:
    """Sum of (1 - GIoU) over matched pairs, in a common normalized frame."""
    pred_boxes = ad.as_tensor(pred_boxes)
    if num_objects is None:
        num_objects = len(matched.assignment)
    denom = float(max(num_objects, 1))
    if not matched.assignment:
        return pred_boxes.sum() * 0.0
    pred, gt = _gather_matched(pred_boxes, matched, gt_boxes)
    giou_vals = geometry.giou_tensor(
        geometry.cxcywh_to_xyxy_tensor(pred), geometry.cxcywh_to_xyxy(gt)
    )
    return (1.0 - giou_vals).sum() * (1.0 / denom)


def set_loss(
    stage_outputs,
    targets,
    lambda_cls: float = 2.0,
    lambda_l1: float = 5.0,
    lambda_giou: float = 2.0,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> LossBreakdown:
    """Deep-supervised set prediction loss over all stages of a batch.

    ``stage_outputs`` is the list produced by the detector forward pass
    (one entry per stage, tensors batched as (B, N, ...)); ``targets`` is
    one ``(labels, boxes)`` pair per image, boxes in normalized
    center-size form. Matching is re-run independently for every stage on
    detached values.
    """
    if not stage_outputs:
        raise ad.ContractError("set_loss requires at least one stage output")
    targets = [
        (np.asarray(lab, dtype=np.intp), np.asarray(box, dtype=np.float64).reshape(-1, 4))
        for lab, box in targets
    ]
    num_objects = sum(len(lab) for lab, _ in targets)
    denom = max(num_objects, 1)

    total = None
    per_stage: list[tuple[float, float, float]] = []
    for stage in stage_outputs:
        logits, boxes = stage.class_logits, stage.boxes
        batch = logits.shape[0]
        stage_cls = stage_l1 = stage_giou = None
        for b in range(batch):
            labels, gt_boxes = targets[b]
            img_logits = ad.reshape(ad.narrow(logits, 0, b, 1), logits.shape[1:])
            img_boxes = ad.reshape(ad.narrow(boxes, 0, b, 1), boxes.shape[1:])
            if len(labels):
                probs = _stable_sigmoid(img_logits.data)
                cost = matching.build_cost_matrix(
                    probs, img_boxes.data, labels, gt_boxes,
                    lambda_cls, lambda_l1, lambda_giou, alpha, gamma,
                )
                match = matching.hungarian(cost)
            else:
                match = MatchResult([], 0.0)
            cls_term = focal_loss(img_logits, match, labels, alpha, gamma, denom)
            l1_term = l1_box_loss(img_boxes, match, gt_boxes, denom)
            giou_term = giou_loss(img_boxes, match, gt_boxes, denom)
            stage_cls = cls_term if stage_cls is None else stage_cls + cls_term
            stage_l1 = l1_term if stage_l1 is None else stage_l1 + l1_term
            stage_giou = giou_term if stage_giou is None else stage_giou + giou_term
        stage_total = lambda_cls * stage_cls + lambda_l1 * stage_l1 + lambda_giou * stage_giou
        total = stage_total if total is None else total + stage_total
        per_stage.append((stage_cls.item(), stage_l1.item(), stage_giou.item()))
    return LossBreakdown(
        total=total,
        cls=sum(s[0] for s in per_stage),
        l1=sum(s[1] for s in per_stage),
        giou=sum(s[2] for s in per_stage),
        per_stage=per_stage,
        num_objects=num_objects,
        empty_batch=num_objects == 0,
    )
