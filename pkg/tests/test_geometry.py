"""Box conversions, IoU/GIoU values, and the box-update rule."""

import numpy as np
import pytest

from sparsedet import autodiff as ad
from sparsedet import geometry
from sparsedet.autodiff import Tensor


class TestConversions:
    def test_full_image_box(self):
        out = geometry.to_absolute(np.array([0.5, 0.5, 1.0, 1.0]), 100, 100)
        np.testing.assert_allclose(out, [0.0, 0.0, 100.0, 100.0])

    def test_hand_converted_box(self):
        out = geometry.to_absolute(np.array([0.25, 0.25, 0.5, 0.5]), 200, 100)
        np.testing.assert_allclose(out, [0.0, 0.0, 100.0, 50.0])

    def test_round_trip_on_random_boxes(self):
        rng = np.random.default_rng(0)
        boxes = np.stack(
            [
                rng.uniform(0.2, 0.8, 1000),
                rng.uniform(0.2, 0.8, 1000),
                rng.uniform(0.05, 0.4, 1000),
                rng.uniform(0.05, 0.4, 1000),
            ],
            axis=-1,
        )
        back = geometry.to_normalized(geometry.to_absolute(boxes, 640, 480), 640, 480)
        assert np.abs(back - boxes).max() < 1e-12

    def test_corner_center_inverses(self):
        rng = np.random.default_rng(1)
        b = rng.uniform(0.1, 0.9, (50, 4))
        np.testing.assert_allclose(
            geometry.xyxy_to_cxcywh(geometry.cxcywh_to_xyxy(b)), b, atol=1e-15
        )


class TestIoU:
    def test_self_iou_is_one(self):
        b = np.array([1.0, 2.0, 4.0, 7.0])
        assert geometry.iou(b, b) == 1.0

    def test_worked_pair(self):
        a = np.array([0.0, 0.0, 2.0, 2.0])
        b = np.array([1.0, 1.0, 3.0, 3.0])
        np.testing.assert_allclose(geometry.iou(a, b), 1.0 / 7.0, atol=1e-15)

    def test_disjoint_boxes(self):
        a = np.array([0.0, 0.0, 1.0, 1.0])
        b = np.array([5.0, 5.0, 6.0, 6.0])
        assert geometry.iou(a, b) == 0.0


class TestGIoU:
    def test_self_giou_is_exactly_one(self):
        b = np.array([1.0, 2.0, 4.0, 7.0])
        assert geometry.giou(b, b) == 1.0

    def test_worked_pair_value(self):
        a = np.array([0.0, 0.0, 2.0, 2.0])
        b = np.array([1.0, 1.0, 3.0, 3.0])
        assert abs(geometry.giou(a, b) - (-5.0 / 63.0)) < 1e-12
        assert abs(geometry.iou(a, b) - 1.0 / 7.0) < 1e-12

    def _random_boxes(self, rng, n):
        lt = rng.uniform(0, 10, (n, 2))
        wh = rng.uniform(0.1, 5, (n, 2))
        return np.concatenate([lt, lt + wh], axis=-1)

    def test_giou_at_most_iou_and_in_range(self):
        rng = np.random.default_rng(2)
        a = self._random_boxes(rng, 10_000)
        b = self._random_boxes(rng, 10_000)
        g = geometry.giou(a, b)
        i = geometry.iou(a, b)
        assert np.all(g <= i + 1e-12)
        assert np.all(g > -1.0)
        assert np.all(g <= 1.0)

    def test_symmetry_is_exact(self):
        rng = np.random.default_rng(3)
        a = self._random_boxes(rng, 1000)
        b = self._random_boxes(rng, 1000)
        np.testing.assert_array_equal(geometry.giou(a, b), geometry.giou(b, a))

    def test_equals_iou_when_hull_equals_union(self):
        a = np.array([0.0, 0.0, 2.0, 2.0])
        b = np.array([0.5, 0.0, 1.5, 2.0])  # contained: hull == a == union
        np.testing.assert_allclose(geometry.giou(a, b), geometry.iou(a, b), atol=0)

    def test_differentiable_version_matches_numpy(self):
        rng = np.random.default_rng(4)
        a = self._random_boxes(rng, 64)
        b = self._random_boxes(rng, 64)
        got = geometry.giou_tensor(Tensor(a), b).data
        np.testing.assert_allclose(got, geometry.giou(a, b), atol=1e-12)


class TestBoxUpdate:
    def test_zero_delta_leaves_box_unchanged(self):
        base = Tensor([0.4, 0.6, 0.2, 0.3])
        out = geometry.box_update(base, Tensor([0.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, base.data, atol=0)

    def test_hand_worked_update(self):
        out = geometry.box_update(
            Tensor([0.5, 0.5, 0.2, 0.2]), Tensor([1.0, 0.0, np.log(2.0), 0.0])
        )
        np.testing.assert_allclose(out.data, [0.7, 0.5, 0.4, 0.2], atol=1e-15)

    def test_any_delta_keeps_box_invariants(self):
        rng = np.random.default_rng(5)
        base = Tensor(
            np.stack(
                [
                    rng.uniform(0, 1, 500),
                    rng.uniform(0, 1, 500),
                    rng.uniform(1e-4, 1, 500),
                    rng.uniform(1e-4, 1, 500),
                ],
                axis=-1,
            )
        )
        delta = Tensor(rng.uniform(-50, 50, (500, 4)))
        out = geometry.box_update(base, delta).data
        assert np.all(out[:, :2] >= 0) and np.all(out[:, :2] <= 1)
        assert np.all(out[:, 2:] >= geometry.MIN_BOX_SIZE) and np.all(out[:, 2:] <= 1)

    def test_gradient_where_clamps_inactive(self):
        base = Tensor(np.array([[0.45, 0.52, 0.31, 0.27]]), requires_grad=True)
        delta = Tensor(np.array([[0.11, -0.07, 0.23, -0.19]]), requires_grad=True)
        report = ad.grad_check(
            lambda b, d: (geometry.box_update(b, d) ** 2.0).sum(), [base, delta]
        )
        assert report.max_error < 1e-6

    def test_shape_mismatch_raises(self):
        with pytest.raises(ad.ShapeError):
            geometry.box_update(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 4))))
