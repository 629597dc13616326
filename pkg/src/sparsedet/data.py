"""Deterministic synthetic detection scenes and their on-disk form.

Scenes are colored axis-aligned rectangles over a noisy background. Class
identity is encoded in the fill color: class k owns a distinct hue band,
and each instance draws its shade from inside the band, so overlapping
same-class rectangles remain visually separable. Annotation boxes are
snapped to the drawn pixel rectangle, making the localization signal
exact.

Every scene is a pure function of (spec, index): the index derives its
own random stream, so generation is reproducible and order-independent.

On disk a dataset is a directory with a line-oriented ``spec.json`` index
(header line with the generation spec, then one record line per image),
``img_%06d.bin`` tensor blobs, and ``ann_%06d.txt`` text annotations with
one ``label cx cy w h`` line per object.
"""

from __future__ import annotations

import colorsys
import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import geometry
from .autodiff import ShapeError
from .exceptions import ConfigError, DataError

TENSOR_MAGIC = b"SSDT"
TENSOR_VERSION = 1
INDEX_NAME = "spec.json"

# Ground-truth overlap caps: ordinary scenes stay below NONCROWD_IOU_CAP;
# crowd scenes contain one constructed pair inside CROWD_PAIR_IOU_RANGE.
NONCROWD_IOU_CAP = 0.3
CROWD_IOU_CAP = 0.8
CROWD_PAIR_IOU_RANGE = (0.6, 0.8)


@dataclass
class DatasetSpec:
    """Everything needed to regenerate a dataset bit-for-bit."""

    num_images: int = 500
    image_size: int = 64
    num_classes: int = 3
    max_objects: int = 4
    crowd_mode: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.num_images < 1 or self.image_size < 16 or self.num_classes < 1:
            raise ConfigError("dataset spec fields must be positive (image_size >= 16)")
        if self.max_objects < 1:
            raise ConfigError("max_objects must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset spec keys: {sorted(unknown)}")
        spec = cls(**d)
        spec.validate()
        return spec


@dataclass
class SyntheticScene:
    """One image with its ground truth.

    ``image`` is (3, H, W) float64 in [0, 1]; ``labels`` is (G,) int and
    ``boxes`` (G, 4) normalized center-size, one row per object.
    """

    image: np.ndarray
    labels: np.ndarray
    boxes: np.ndarray
    index: int = 0

    @property
    def annotations(self) -> list[tuple[int, np.ndarray]]:
        return [(int(l), b) for l, b in zip(self.labels, self.boxes)]


def _class_color(rng: np.random.Generator, label: int, num_classes: int) -> np.ndarray:
    """A shade from class ``label``'s hue band (bands are disjoint)."""
    hue = (label + 0.3 + 0.4 * rng.random()) / num_classes
    sat = 0.75 + 0.2 * rng.random()
    val = 0.75 + 0.2 * rng.random()
    return np.array(colorsys.hsv_to_rgb(hue % 1.0, sat, val))


def _snap_box(x0: int, y0: int, w: int, h: int, size: int) -> np.ndarray:
    """Pixel rectangle -> normalized center-size box."""
    return np.array([(x0 + w / 2) / size, (y0 + h / 2) / size, w / size, h / size])


def _pixel_iou(a, b) -> float:
    ax0, ay0, aw, ah = a
    bx0, by0, bw, bh = b
    return float(
        geometry.iou(
            np.array([ax0, ay0, ax0 + aw, ay0 + ah], dtype=float),
            np.array([bx0, by0, bx0 + bw, by0 + bh], dtype=float),
        )
    )


def generate_scene(spec: DatasetSpec, index: int) -> SyntheticScene:
    """Generate scene ``index`` of the dataset described by ``spec``."""
    spec.validate()
    if index < 0:
        raise ConfigError(f"scene index must be non-negative, got {index}")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    size = spec.image_size

    base = rng.uniform(0.30, 0.50)
    image = np.clip(base + rng.normal(0.0, 0.03, (3, size, size)), 0.0, 1.0)

    count = int(rng.integers(1, spec.max_objects + 1))
    rects: list[tuple[int, int, int, int]] = []  # (x0, y0, w, h) in pixels
    labels: list[int] = []

    min_side = max(4, size // 8)
    max_side = max(min_side + 1, size // 2)

    if spec.crowd_mode and count >= 2:
        # One constructed pair of same-class, same-size rectangles whose
        # IoU falls inside CROWD_PAIR_IOU_RANGE.
        for _ in range(100):
            w = int(rng.integers(size // 4, max_side))
            h = int(rng.integers(size // 4, max_side))
            tau = rng.uniform(0.64, 0.76)
            shift = max(1, round(w * (1.0 - tau) / (1.0 + tau)))
            pair_iou = (w - shift) / (w + shift)
            if not (CROWD_PAIR_IOU_RANGE[0] < pair_iou < CROWD_PAIR_IOU_RANGE[1]):
                continue
            if size - w - shift <= 0:
                continue
            x0 = int(rng.integers(0, size - w - shift))
            y0 = int(rng.integers(0, size - h))
            label = int(rng.integers(spec.num_classes))
            rects += [(x0, y0, w, h), (x0 + shift, y0, w, h)]
            labels += [label, label]
            break

    attempts = 0
    while len(rects) < count and attempts < 200:
        attempts += 1
        w = int(rng.integers(min_side, max_side))
        h = int(rng.integers(min_side, max_side))
        x0 = int(rng.integers(0, size - w))
        y0 = int(rng.integers(0, size - h))
        cand = (x0, y0, w, h)
        if all(_pixel_iou(cand, r) <= NONCROWD_IOU_CAP for r in rects):
            rects.append(cand)
            labels.append(int(rng.integers(spec.num_classes)))

    boxes = np.array([_snap_box(*r, size) for r in rects])
    for (x0, y0, w, h), label in zip(rects, labels):
        color = _class_color(rng, label, spec.num_classes)
        image[:, y0 : y0 + h, x0 : x0 + w] = color[:, None, None]
    return SyntheticScene(image=image, labels=np.array(labels, dtype=np.intp),
                          boxes=boxes, index=index)


def generate_dataset(spec: DatasetSpec, start: int = 0, count: int | None = None) -> list[SyntheticScene]:
    """Scenes ``[start, start+count)``; defaults to the whole dataset."""
    if count is None:
        count = spec.num_images
    return [generate_scene(spec, i) for i in range(start, start + count)]


def flip_horizontal(image: np.ndarray, boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mirror an image and its normalized boxes left-right."""
    flipped = np.ascontiguousarray(image[:, :, ::-1])
    out = boxes.copy()
    if len(out):
        out[:, 0] = 1.0 - out[:, 0]
    return flipped, out


def batch_scenes(scenes, batch_size: int):
    """Stack scenes into (images, targets) batches, preserving order.

    ``images`` is (B, 3, H, W); ``targets`` is a list of (labels, boxes)
    pairs. All images in a batch must share one size.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be at least 1")
    batches = []
    for lo in range(0, len(scenes), batch_size):
        chunk = scenes[lo : lo + batch_size]
        shapes = {s.image.shape for s in chunk}
        if len(shapes) > 1:
            raise ShapeError(f"cannot stack mixed image sizes {sorted(shapes)} in one batch")
        images = np.stack([s.image for s in chunk])
        targets = [(s.labels, s.boxes) for s in chunk]
        batches.append((images, targets))
    return batches


# -- tensor blobs ----------------------------------------------------------------


def write_tensor(path, array: np.ndarray) -> None:
    """Write a float64 tensor blob (magic, version, rank, dims, payload, crc)."""
    array = np.ascontiguousarray(np.asarray(array, dtype=np.float64))
    payload = array.tobytes()
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<II", TENSOR_VERSION, array.ndim))
        fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def read_tensor(path) -> np.ndarray:
    """Read a tensor blob, verifying magic, version, size, and checksum."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read tensor blob {path}: {e}") from e
    if len(raw) < 12 or raw[:4] != TENSOR_MAGIC:
        raise DataError(f"{path}: not a tensor blob (bad magic)")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != TENSOR_VERSION:
        raise DataError(f"{path}: unsupported blob version {version}")
    header_end = 12 + 4 * rank
    if len(raw) < header_end:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, 12)
    n = int(np.prod(dims)) if rank else 1
    expected = header_end + 8 * n + 4
    if len(raw) != expected:
        raise DataError(f"{path}: truncated blob ({len(raw)} bytes, expected {expected})")
    payload = raw[header_end : header_end + 8 * n]
    (crc,) = struct.unpack_from("<I", raw, header_end + 8 * n)
    if crc != zlib.crc32(payload):
        raise DataError(f"{path}: checksum mismatch")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()


# -- dataset directory -------------------------------------------------------------


def save_dataset(path, spec: DatasetSpec, scenes) -> None:
    """Write scenes plus a line-oriented index under ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"format_version": 1, "dataset": spec.to_dict()}, sort_keys=True)]
    for pos, scene in enumerate(scenes):
        img_name = f"img_{pos:06d}.bin"
        ann_name = f"ann_{pos:06d}.txt"
        write_tensor(root / img_name, scene.image)
        with open(root / ann_name, "w", encoding="utf-8") as fh:
            for label, box in zip(scene.labels, scene.boxes):
                coords = " ".join(repr(float(v)) for v in box)
                fh.write(f"{int(label)} {coords}\n")
        lines.append(json.dumps(
            {"id": scene.index, "image": img_name, "annotations": ann_name}, sort_keys=True
        ))
    (root / INDEX_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path) -> tuple[DatasetSpec, list[SyntheticScene]]:
    """Read a dataset directory back; inverse of :func:`save_dataset`."""
    root = Path(path)
    index_path = root / INDEX_NAME
    if not index_path.is_file():
        raise DataError(f"no dataset index at {index_path}")
    lines = index_path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"{index_path}: empty index")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DataError(f"{index_path}: malformed header: {e}") from e
    if header.get("format_version") != 1:
        raise DataError(f"{index_path}: unsupported index version {header.get('format_version')}")
    spec = DatasetSpec.from_dict(header["dataset"])

    scenes = []
    for line in lines[1:]:
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{index_path}: malformed record: {e}") from e
        image = read_tensor(root / rec["image"])
        labels, boxes = [], []
        ann_path = root / rec["annotations"]
        try:
            ann_lines = ann_path.read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise DataError(f"cannot read annotations {ann_path}: {e}") from e
        for ann in ann_lines:
            parts = ann.split()
            if len(parts) != 5:
                raise DataError(f"{ann_path}: malformed annotation line {ann!r}")
            labels.append(int(parts[0]))
            boxes.append([float(p) for p in parts[1:]])
        scenes.append(SyntheticScene(
            image=image,
            labels=np.array(labels, dtype=np.intp),
            boxes=np.array(boxes, dtype=np.float64).reshape(-1, 4),
            index=int(rec["id"]),
        ))
    return spec, scenes
