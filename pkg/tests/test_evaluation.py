"""Greedy eval matching, 101-point AP, and the aggregated report."""

import numpy as np

from sparsedet.evaluation import (
    Detection,
    average_precision,
    map_report,
    match_for_eval,
    recall_at_score,
)


def _det(label, score, box, image_id=0):
    return Detection(image_id, label, score, np.asarray(box, dtype=float))


BOX = [0.5, 0.5, 0.2, 0.2]


class TestMatchForEval:
    def test_exact_detection_is_tp(self):
        dets = [_det(0, 0.9, BOX)]
        _, _, flags = match_for_eval(dets, np.array([0]), np.array([BOX]), 0.5)
        assert flags.tolist() == [True]

    def test_second_detection_on_same_gt_is_fp(self):
        dets = [_det(0, 0.9, BOX), _det(0, 0.8, BOX)]
        scores, _, flags = match_for_eval(dets, np.array([0]), np.array([BOX]), 0.5)
        assert scores.tolist() == [0.9, 0.8]
        assert flags.tolist() == [True, False]

    def test_low_iou_is_fp(self):
        shifted = [0.8, 0.8, 0.2, 0.2]
        dets = [_det(0, 0.9, shifted)]
        _, _, flags = match_for_eval(dets, np.array([0]), np.array([BOX]), 0.5)
        assert flags.tolist() == [False]

    def test_wrong_class_never_matches(self):
        dets = [_det(1, 0.9, BOX)]
        _, _, flags = match_for_eval(dets, np.array([0]), np.array([BOX]), 0.5)
        assert flags.tolist() == [False]


class TestAveragePrecision:
    def test_single_tp_gives_one(self):
        assert average_precision([0.7], [True], 1) == 1.0

    def test_fp_above_tp_gives_half(self):
        ap = average_precision([0.9, 0.8], [False, True], 1)
        np.testing.assert_allclose(ap, 0.5)

    def test_no_detections_with_gt_gives_zero(self):
        assert average_precision([], [], 3) == 0.0

    def test_no_gt_with_detections_gives_zero(self):
        assert average_precision([0.9], [False], 0) == 0.0

    def test_no_gt_no_detections_skipped(self):
        assert average_precision([], [], 0) is None


class TestMapReport:
    def _scene_gts(self, n_images=4):
        rng = np.random.default_rng(0)
        gts = []
        for _ in range(n_images):
            g = int(rng.integers(1, 4))
            boxes = np.concatenate(
                [rng.uniform(0.3, 0.7, (g, 2)), rng.uniform(0.1, 0.25, (g, 2))], axis=1
            )
            labels = rng.integers(0, 3, g)
            gts.append((labels, boxes))
        return gts

    def test_perfect_detector_scores_one_everywhere(self):
        gts = self._scene_gts()
        dets = [
            [_det(int(l), 0.95, b, i) for l, b in zip(labels, boxes)]
            for i, (labels, boxes) in enumerate(gts)
        ]
        report = map_report(dets, gts)
        assert report.ap == 1.0 and report.ap50 == 1.0 and report.ap75 == 1.0

    def test_empty_detector_scores_zero(self):
        gts = self._scene_gts()
        report = map_report([[] for _ in gts], gts)
        assert report.ap == 0.0 and report.ap50 == 0.0

    def test_ap50_at_least_ap(self):
        rng = np.random.default_rng(1)
        gts = self._scene_gts()
        dets = []
        for i, (labels, boxes) in enumerate(gts):
            row = [
                _det(int(l), float(rng.uniform(0.3, 1.0)), b + rng.normal(0, 0.02, 4), i)
                for l, b in zip(labels, boxes)
            ]
            dets.append(row)
        report = map_report(dets, gts)
        assert report.ap50 >= report.ap - 1e-12

    def test_duplicates_never_raise_ap(self):
        gts = self._scene_gts()
        clean = [
            [_det(int(l), 0.9, b, i) for l, b in zip(labels, boxes)]
            for i, (labels, boxes) in enumerate(gts)
        ]
        noisy = [row + [_det(d.label, 0.5, d.box + 0.01, d.image_id) for d in row] for row in clean]
        assert map_report(noisy, gts).ap <= map_report(clean, gts).ap + 1e-12

    def test_report_serializes(self):
        gts = self._scene_gts(2)
        dets = [
            [_det(int(l), 0.9, b, i) for l, b in zip(labels, boxes)]
            for i, (labels, boxes) in enumerate(gts)
        ]
        report = map_report(dets, gts)
        d = report.to_dict()
        assert set(d) >= {"AP", "AP50", "AP75", "per_class"}
        assert "AP50" in report.format_table() or "AP" in report.format_table()


class TestRecall:
    def test_recall_counts_only_confident_detections(self):
        gts = [(np.array([0]), np.array([BOX]))]
        dets = [[_det(0, 0.2, BOX)]]
        assert recall_at_score(dets, gts, score_floor=0.3) == 0.0
        dets = [[_det(0, 0.4, BOX)]]
        assert recall_at_score(dets, gts, score_floor=0.3) == 1.0
