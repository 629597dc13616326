"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .model import BACKBONE_STRIDE


def check_images(X) -> np.ndarray:
    """Validate a batch of images: (n, 3, H, W) float64, finite, dims/8."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images shaped (n, 3, H, W), got {X.shape}")
    if X.shape[2] % BACKBONE_STRIDE or X.shape[3] % BACKBONE_STRIDE:
        raise ValueError(
            f"image height and width must be divisible by {BACKBONE_STRIDE}, "
            f"got {X.shape[2]}x{X.shape[3]}"
        )
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    return X


def check_annotations(y, n_images: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Normalize per-image annotations to (labels, boxes) pairs.

    Accepts one (G, 5) array per image with rows ``label, cx, cy, w, h``,
    or a (labels, boxes) pair. Boxes must be normalized center-size form.
    """
    if len(y) != n_images:
        raise ValueError(f"got {len(y)} annotation lists for {n_images} images")
    out = []
    for i, item in enumerate(y):
        if isinstance(item, tuple) and len(item) == 2:
            labels = np.asarray(item[0], dtype=np.intp).reshape(-1)
            boxes = np.asarray(item[1], dtype=np.float64).reshape(-1, 4)
        else:
            arr = np.asarray(item, dtype=np.float64).reshape(-1, 5)
            labels = arr[:, 0].astype(np.intp)
            boxes = arr[:, 1:]
        if len(labels) != len(boxes):
            raise ValueError(f"image {i}: {len(labels)} labels but {len(boxes)} boxes")
        if np.any(labels < 0):
            raise ValueError(f"image {i}: negative class label")
        if len(boxes) and (boxes.min() < 0.0 or boxes.max() > 1.0):
            raise ValueError(f"image {i}: boxes must be normalized to [0, 1]")
        out.append((labels, boxes))
    return out
