"""Synthetic scenes: determinism, invariants, and on-disk round trips."""

import numpy as np
import pytest

from sparsedet import geometry
from sparsedet.autodiff import ShapeError
from sparsedet.data import (
    CROWD_PAIR_IOU_RANGE,
    NONCROWD_IOU_CAP,
    DatasetSpec,
    batch_scenes,
    flip_horizontal,
    generate_dataset,
    generate_scene,
    load_dataset,
    read_tensor,
    save_dataset,
    write_tensor,
)
from sparsedet.exceptions import DataError


def _spec(**kw) -> DatasetSpec:
    base = dict(num_images=20, image_size=64, num_classes=3, max_objects=4, seed=0)
    base.update(kw)
    return DatasetSpec(**base)


class TestGeneration:
    def test_same_index_gives_bit_identical_scene(self):
        spec = _spec()
        a = generate_scene(spec, 3)
        b = generate_scene(spec, 3)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.boxes, b.boxes)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_boxes_inside_image_and_labels_in_range(self):
        spec = _spec()
        for scene in generate_dataset(spec):
            assert 1 <= len(scene.labels) <= spec.max_objects
            xyxy = geometry.cxcywh_to_xyxy(scene.boxes)
            assert xyxy.min() >= 0.0 and xyxy.max() <= 1.0
            assert scene.labels.min() >= 0 and scene.labels.max() < spec.num_classes

    def test_noncrowd_pairwise_iou_capped(self):
        for scene in generate_dataset(_spec(num_images=40)):
            if len(scene.boxes) < 2:
                continue
            ious = geometry.pairwise_iou(
                geometry.cxcywh_to_xyxy(scene.boxes), geometry.cxcywh_to_xyxy(scene.boxes)
            )
            np.fill_diagonal(ious, 0.0)
            assert ious.max() <= NONCROWD_IOU_CAP + 1e-12

    def test_crowd_scenes_contain_a_high_overlap_pair(self):
        spec = _spec(crowd_mode=True, num_images=40)
        found = 0
        for scene in generate_dataset(spec):
            if len(scene.boxes) < 2:
                continue
            ious = geometry.pairwise_iou(
                geometry.cxcywh_to_xyxy(scene.boxes), geometry.cxcywh_to_xyxy(scene.boxes)
            )
            np.fill_diagonal(ious, 0.0)
            if ious.max() >= CROWD_PAIR_IOU_RANGE[0]:
                assert ious.max() <= CROWD_PAIR_IOU_RANGE[1] + 1e-12
                found += 1
        assert found >= 10

    def test_pixel_values_in_unit_range(self):
        scene = generate_scene(_spec(), 0)
        assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0

    def test_color_identifies_class(self):
        """Nearest-mean-color classification of GT crops is nearly perfect."""
        spec = _spec(num_images=80)
        scenes = generate_dataset(spec)
        crops: dict[int, list[np.ndarray]] = {k: [] for k in range(spec.num_classes)}
        samples = []
        for scene in scenes:
            size = spec.image_size
            for label, box in zip(scene.labels, scene.boxes):
                x0, y0, x1, y1 = np.round(geometry.to_absolute(box, size, size)).astype(int)
                # Interior mean avoids occlusion edges.
                crop = scene.image[:, y0 + 1 : y1 - 1, x0 + 1 : x1 - 1]
                if crop.size == 0:
                    continue
                mean = crop.reshape(3, -1).mean(axis=1)
                crops[int(label)].append(mean)
                samples.append((int(label), mean))
        prototypes = {k: np.mean(v, axis=0) for k, v in crops.items() if v}
        correct = sum(
            1
            for label, mean in samples
            if min(prototypes, key=lambda k: np.linalg.norm(prototypes[k] - mean)) == label
        )
        assert correct / len(samples) > 0.95


class TestTensorBlobs:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.uniform(-5, 5, (3, 4, 5))
        path = tmp_path / "t.bin"
        write_tensor(path, arr)
        np.testing.assert_array_equal(read_tensor(path), arr)

    def test_corrupted_magic_is_a_format_error(self, tmp_path):
        path = tmp_path / "t.bin"
        write_tensor(path, np.zeros(4))
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="magic"):
            read_tensor(path)

    def test_truncated_blob_detected(self, tmp_path):
        path = tmp_path / "t.bin"
        write_tensor(path, np.zeros((2, 2)))
        path.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(DataError, match="truncated"):
            read_tensor(path)

    def test_checksum_failure_detected(self, tmp_path):
        path = tmp_path / "t.bin"
        write_tensor(path, np.arange(6.0))
        raw = bytearray(path.read_bytes())
        raw[20] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="checksum"):
            read_tensor(path)


class TestDatasetIO:
    def test_save_load_round_trip(self, tmp_path):
        spec = _spec(num_images=6)
        scenes = generate_dataset(spec)
        save_dataset(tmp_path / "ds", spec, scenes)
        loaded_spec, loaded = load_dataset(tmp_path / "ds")
        assert loaded_spec == spec
        for a, b in zip(scenes, loaded):
            np.testing.assert_array_equal(a.image, b.image)
            np.testing.assert_array_equal(a.boxes, b.boxes)
            np.testing.assert_array_equal(a.labels, b.labels)

    def test_index_line_count_is_images_plus_header(self, tmp_path):
        spec = _spec(num_images=5)
        save_dataset(tmp_path / "ds", spec, generate_dataset(spec))
        lines = (tmp_path / "ds" / "spec.json").read_text().splitlines()
        assert len(lines) == spec.num_images + 1

    def test_missing_index_is_a_data_error(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nowhere")


class TestBatching:
    def test_batch_of_one(self):
        scenes = generate_dataset(_spec(num_images=3))
        batches = batch_scenes(scenes, 1)
        assert [b[0].shape[0] for b in batches] == [1, 1, 1]

    def test_batch_sizes_four_four_two(self):
        scenes = generate_dataset(_spec(num_images=10))
        batches = batch_scenes(scenes, 4)
        assert [b[0].shape[0] for b in batches] == [4, 4, 2]

    def test_annotation_order_preserved(self):
        scenes = generate_dataset(_spec(num_images=4))
        batches = batch_scenes(scenes, 2)
        flat = [t for _, targets in batches for t in targets]
        for scene, (labels, boxes) in zip(scenes, flat):
            np.testing.assert_array_equal(labels, scene.labels)
            np.testing.assert_array_equal(boxes, scene.boxes)

    def test_mixed_sizes_rejected(self):
        spec_a = _spec(num_images=1)
        spec_b = _spec(num_images=1, image_size=32)
        scenes = generate_dataset(spec_a) + generate_dataset(spec_b)
        with pytest.raises(ShapeError):
            batch_scenes(scenes, 2)


class TestFlip:
    def test_flip_is_an_involution(self):
        scene = generate_scene(_spec(), 1)
        img, boxes = flip_horizontal(scene.image, scene.boxes)
        img2, boxes2 = flip_horizontal(img, boxes)
        np.testing.assert_array_equal(img2, scene.image)
        np.testing.assert_allclose(boxes2, scene.boxes, atol=1e-15)

    def test_flip_mirrors_centers(self):
        scene = generate_scene(_spec(), 2)
        _, boxes = flip_horizontal(scene.image, scene.boxes)
        np.testing.assert_allclose(boxes[:, 0], 1.0 - scene.boxes[:, 0], atol=1e-15)
        np.testing.assert_array_equal(boxes[:, 1:], scene.boxes[:, 1:])
