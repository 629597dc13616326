"""Box representations, conversions, IoU/GIoU, and the per-stage box update.

Two conventions are used throughout the package:

* normalized center-size form ``(cx, cy, w, h)``, every component in
  [0, 1], as fractions of image width/height;
* absolute corner form ``(x0, y0, x1, y1)`` with ``x0 <= x1``,
  ``y0 <= y1``.

Boxes travel as the last axis of numpy arrays (``(..., 4)``). The two
functions that must be differentiable, :func:`box_update` and
:func:`giou_tensor`, also accept autodiff tensors.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# Smallest admissible normalized width/height after clamping.
MIN_BOX_SIZE = 1e-4
# Guard against zero-area unions and hulls.
AREA_EPS = 1e-9
# Log-scale size deltas are clipped here before exponentiation.
DELTA_CLIP = 4.0


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    x0, y0, x1, y1 = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def to_absolute(box: np.ndarray, image_w: float, image_h: float) -> np.ndarray:
    """Normalized center-size box -> absolute pixel corners."""
    box = np.asarray(box, dtype=np.float64)
    scale = np.array([image_w, image_h, image_w, image_h], dtype=np.float64)
    return cxcywh_to_xyxy(box * scale)


def to_normalized(box: np.ndarray, image_w: float, image_h: float) -> np.ndarray:
    """Absolute pixel corners -> normalized center-size box."""
    box = np.asarray(box, dtype=np.float64)
    scale = np.array([image_w, image_h, image_w, image_h], dtype=np.float64)
    return xyxy_to_cxcywh(box) / scale


def _areas(xyxy: np.ndarray) -> np.ndarray:
    return np.maximum(xyxy[..., 2] - xyxy[..., 0], 0.0) * np.maximum(
        xyxy[..., 3] - xyxy[..., 1], 0.0
    )


def iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of corner boxes; 0 for disjoint pairs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lt = np.maximum(a[..., :2], b[..., :2])
    rb = np.minimum(a[..., 2:], b[..., 2:])
    wh = np.maximum(rb - lt, 0.0)
    inter = wh[..., 0] * wh[..., 1]
    union = _areas(a) + _areas(b) - inter
    return inter / np.maximum(union, AREA_EPS)


def giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise generalized IoU: IoU minus the hull's dead-area fraction.

    Range (-1, 1]; equals IoU whenever the enclosing hull is exactly the
    union.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lt = np.maximum(a[..., :2], b[..., :2])
    rb = np.minimum(a[..., 2:], b[..., 2:])
    wh = np.maximum(rb - lt, 0.0)
    inter = wh[..., 0] * wh[..., 1]
    union = _areas(a) + _areas(b) - inter
    hull_lt = np.minimum(a[..., :2], b[..., :2])
    hull_rb = np.maximum(a[..., 2:], b[..., 2:])
    hull_wh = hull_rb - hull_lt
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    return inter / np.maximum(union, AREA_EPS) - (hull - union) / np.maximum(hull, AREA_EPS)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs IoU of corner boxes, shape (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[None, :, :]
    return iou(a, b)


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs GIoU of corner boxes, shape (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[None, :, :]
    return giou(a, b)


def clamp_box_tensor(boxes: Tensor) -> Tensor:
    """Clamp a (..., 4) center-size tensor to the normalized-box invariants."""
    center = ad.clamp(ad.narrow(boxes, boxes.ndim - 1, 0, 2), 0.0, 1.0)
    size = ad.clamp(ad.narrow(boxes, boxes.ndim - 1, 2, 2), MIN_BOX_SIZE, 1.0)
    return ad.concat([center, size], axis=boxes.ndim - 1)


def box_update(base, delta) -> Tensor:
    """Refine normalized center-size boxes by a per-stage regression delta.

    Scale-relative center shift plus log-scale size change:
    ``cx' = cx + d0*w``, ``cy' = cy + d1*h``, ``w' = w*exp(d2)``,
    ``h' = h*exp(d3)``, with d2/d3 clipped to +-DELTA_CLIP before
    exponentiation and the result clamped back to the box invariants.
    Differentiable in both arguments wherever the clamps are inactive.
    """
    base = ad.as_tensor(base)
    delta = ad.as_tensor(delta)
    if base.shape != delta.shape or base.shape[-1] != 4:
        raise ad.ShapeError(f"box_update shapes incompatible: {base.shape} vs {delta.shape}")
    axis = base.ndim - 1
    cx = ad.narrow(base, axis, 0, 1)
    cy = ad.narrow(base, axis, 1, 1)
    w = ad.narrow(base, axis, 2, 1)
    h = ad.narrow(base, axis, 3, 1)
    d0 = ad.narrow(delta, axis, 0, 1)
    d1 = ad.narrow(delta, axis, 1, 1)
    d2 = ad.clamp(ad.narrow(delta, axis, 2, 1), -DELTA_CLIP, DELTA_CLIP)
    d3 = ad.clamp(ad.narrow(delta, axis, 3, 1), -DELTA_CLIP, DELTA_CLIP)
    out = ad.concat(
        [cx + d0 * w, cy + d1 * h, w * ad.exp(d2), h * ad.exp(d3)], axis=axis
    )
    return clamp_box_tensor(out)


def cxcywh_to_xyxy_tensor(boxes: Tensor) -> Tensor:
    """Differentiable center-size to corner conversion on the last axis."""
    boxes = ad.as_tensor(boxes)
    axis = boxes.ndim - 1
    cx = ad.narrow(boxes, axis, 0, 1)
    cy = ad.narrow(boxes, axis, 1, 1)
    half_w = ad.narrow(boxes, axis, 2, 1) * 0.5
    half_h = ad.narrow(boxes, axis, 3, 1) * 0.5
    return ad.concat([cx - half_w, cy - half_h, cx + half_w, cy + half_h], axis=axis)


def giou_tensor(pred_xyxy: Tensor, target_xyxy) -> Tensor:
    """Differentiable elementwise GIoU between (M, 4) corner boxes.

    ``target_xyxy`` is typically a constant array of ground-truth boxes;
    gradients flow to ``pred_xyxy`` only in that case.
    """
    a = ad.as_tensor(pred_xyxy)
    b = ad.as_tensor(target_xyxy)
    ax0, ay0 = ad.narrow(a, 1, 0, 1), ad.narrow(a, 1, 1, 1)
    ax1, ay1 = ad.narrow(a, 1, 2, 1), ad.narrow(a, 1, 3, 1)
    bx0, by0 = ad.narrow(b, 1, 0, 1), ad.narrow(b, 1, 1, 1)
    bx1, by1 = ad.narrow(b, 1, 2, 1), ad.narrow(b, 1, 3, 1)

    inter_w = ad.clamp(ad.minimum(ax1, bx1) - ad.maximum(ax0, bx0), lo=0.0)
    inter_h = ad.clamp(ad.minimum(ay1, by1) - ad.maximum(ay0, by0), lo=0.0)
    inter = inter_w * inter_h
    area_a = ad.clamp(ax1 - ax0, lo=0.0) * ad.clamp(ay1 - ay0, lo=0.0)
    area_b = ad.clamp(bx1 - bx0, lo=0.0) * ad.clamp(by1 - by0, lo=0.0)
    union = area_a + area_b - inter
    hull = (ad.maximum(ax1, bx1) - ad.minimum(ax0, bx0)) * (
        ad.maximum(ay1, by1) - ad.minimum(ay0, by0)
    )
    iou_term = inter / ad.clamp(union, lo=AREA_EPS)
    dead = (hull - union) / ad.clamp(hull, lo=AREA_EPS)
    return ad.reshape(iou_term - dead, (a.shape[0],))
