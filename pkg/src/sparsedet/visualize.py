"""Plain PPM renderings of ground truth and per-stage predicted boxes."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import geometry

GT_COLOR = (255, 255, 255)
GOLDEN_RATIO = 0.618033988749895


def proposal_color(index: int) -> tuple[int, int, int]:
    """A stable, well-separated color per proposal index (same across stages)."""
    import colorsys

    hue = (index * GOLDEN_RATIO) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.95, 1.0)
    return int(r * 255), int(g * 255), int(b * 255)


def draw_box(canvas: np.ndarray, box_norm: np.ndarray, color) -> None:
    """1-pixel rectangle outline; ``canvas`` is (H, W, 3) uint8."""
    h, w = canvas.shape[:2]
    x0, y0, x1, y1 = geometry.to_absolute(box_norm, w, h)
    x0 = int(np.clip(round(x0), 0, w - 1))
    x1 = int(np.clip(round(x1) - 1, 0, w - 1))
    y0 = int(np.clip(round(y0), 0, h - 1))
    y1 = int(np.clip(round(y1) - 1, 0, h - 1))
    if x1 < x0 or y1 < y0:
        return
    col = np.array(color, dtype=np.uint8)
    canvas[y0, x0 : x1 + 1] = col
    canvas[y1, x0 : x1 + 1] = col
    canvas[y0 : y1 + 1, x0] = col
    canvas[y0 : y1 + 1, x1] = col


def write_ppm(path, canvas: np.ndarray) -> None:
    """Write (H, W, 3) uint8 as a plain (ASCII, P3) portable pixmap."""
    h, w = canvas.shape[:2]
    lines = [f"P3\n{w} {h}\n255\n"]
    flat = canvas.reshape(-1, 3)
    lines.extend(f"{r} {g} {b}\n" for r, g, b in flat)
    Path(path).write_text("".join(lines), encoding="ascii")


def render_scene(
    image: np.ndarray,
    gt_boxes: np.ndarray,
    stage_boxes: list[tuple[np.ndarray, np.ndarray]],
    out_path,
    score_floor: float = 0.3,
) -> None:
    """Draw GT boxes (fixed color) and per-stage predictions above the floor.

    ``image`` is (3, H, W) in [0, 1]; ``stage_boxes`` holds one
    (boxes (N, 4), scores (N,)) pair per selected stage. The same
    proposal index keeps the same color across stages.
    """
    canvas = np.ascontiguousarray(
        (np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    )
    for box in np.asarray(gt_boxes).reshape(-1, 4):
        draw_box(canvas, box, GT_COLOR)
    for boxes, scores in stage_boxes:
        for idx, (box, score) in enumerate(zip(boxes, scores)):
            if score >= score_floor:
                draw_box(canvas, box, proposal_color(idx))
    write_ppm(out_path, canvas)
