import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amtubes.evaluation import (
    GroundTruthTube,
    average_precision,
    frame_ap,
    match_detections,
    mean_ap,
    tube_iou,
    video_ap,
)
from amtubes.geometry import Box, iou
from amtubes.tubes import ActionTube

from conftest import boxes

A = [0.1, 0.1, 0.3, 0.3]
FAR = [0.6, 0.6, 0.9, 0.9]


def tube(start, end, box=A, score=0.9, cls=1, video="v"):
    n = end - start + 1
    return ActionTube(cls, start, end, np.tile(box, (n, 1)), np.full(n, score), score, video)


def gt(start, end, box=A, cls=1, video="v"):
    return GroundTruthTube(video, cls, start, end, np.tile(box, (end - start + 1, 1)))


def pr_oracle(tp_flags, n_gt):
    """AP from the precision at every rank cutoff, taking the best precision at or beyond each recall."""
    cut = []
    hits = 0
    for k, flag in enumerate(tp_flags, start=1):
        hits += flag
        cut.append((hits / n_gt, hits / k))
    ap = 0.0
    prev_recall = 0.0
    for recall, _ in cut:
        if recall > prev_recall:
            ap += (recall - prev_recall) * max(p for r, p in cut if r >= recall)
            prev_recall = recall
    return ap


class TestTubeIou:
    def test_identical(self):
        assert tube_iou(tube(0, 9), tube(0, 9)) == 1.0

    def test_temporally_disjoint(self):
        assert tube_iou(tube(0, 4), tube(5, 9)) == 0.0

    def test_half_coverage(self):
        assert tube_iou(tube(0, 9), tube(0, 4)) == 0.5

    def test_against_ground_truth(self):
        assert tube_iou(tube(2, 5, box=FAR), gt(2, 5)) == 0.0
        assert tube_iou(tube(0, 3), gt(2, 5)) == pytest.approx(2 / 6)

    @given(boxes(), boxes())
    def test_single_frame_equals_box_iou(self, a, b):
        ta = tube(3, 3, box=a.to_array())
        tb = tube(3, 3, box=b.to_array())
        assert tube_iou(ta, tb) == pytest.approx(iou(a, b), abs=1e-12)

    @given(st.integers(0, 10), st.integers(0, 10), st.integers(0, 10), st.integers(0, 10), boxes(), boxes())
    def test_symmetric_and_bounded(self, s1, l1, s2, l2, a, b):
        ta = tube(s1, s1 + l1, box=a.to_array())
        tb = tube(s2, s2 + l2, box=b.to_array())
        v = tube_iou(ta, tb)
        assert v == tube_iou(tb, ta)
        assert 0.0 <= v <= 1.0


class TestAveragePrecision:
    def test_one_perfect(self):
        assert average_precision([0.9], np.array([[1.0]])) == 1.0

    def test_one_miss(self):
        assert average_precision([0.9], np.array([[0.0]])) == 0.0

    def test_no_detections(self):
        assert average_precision([], np.zeros((0, 2))) == 0.0

    def test_crafted_three_gt_five_detections(self):
        scores = [0.9, 0.8, 0.7, 0.6, 0.5]
        overlaps = np.array([
            [0.8, 0.0, 0.0],  # hit g0
            [0.2, 0.0, 0.0],  # below threshold
            [0.0, 0.6, 0.0],  # hit g1
            [0.7, 0.0, 0.1],  # g0 already taken, g2 too weak
            [0.0, 0.0, 0.9],  # hit g2
        ])
        res = match_detections(scores, overlaps, 0.5)
        np.testing.assert_array_equal(res.tp, [1, 0, 1, 0, 1])
        np.testing.assert_array_equal(res.matched, [0, -1, 1, -1, 2])
        expect = pr_oracle([1, 0, 1, 0, 1], 3)
        assert expect == pytest.approx((1 + 2 / 3 + 0.6) / 3)
        assert average_precision(scores, overlaps, 0.5) == pytest.approx(expect, abs=1e-12)

    def test_each_ground_truth_matched_once(self):
        res = match_detections([0.9, 0.8], np.array([[1.0], [1.0]]), 0.5)
        np.testing.assert_array_equal(res.tp, [1, 0])

    def test_threshold_is_inclusive(self):
        assert average_precision([0.9], np.array([[0.5]]), 0.5) == 1.0

    @settings(max_examples=100)
    @given(st.integers(1, 8), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_matches_pr_oracle(self, n_det, n_gt, seed):
        rng = np.random.default_rng(seed)
        scores = rng.permutation(n_det) / n_det
        overlaps = rng.random((n_det, n_gt))
        res = match_detections(scores, overlaps, 0.5)
        assert average_precision(scores, overlaps, 0.5) == pytest.approx(pr_oracle(res.tp, n_gt), abs=1e-12)

    @settings(max_examples=100)
    @given(st.integers(1, 8), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_monotone_transform_invariance(self, n_det, n_gt, seed):
        rng = np.random.default_rng(seed)
        scores = rng.permutation(n_det) / n_det
        overlaps = rng.random((n_det, n_gt))
        base = average_precision(scores, overlaps)
        assert 0.0 <= base <= 1.0
        assert average_precision(np.exp(3 * scores) - 7, overlaps) == base
        assert average_precision(scores**3 + 2 * scores, overlaps) == base

    @settings(max_examples=100)
    @given(st.integers(1, 8), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_trailing_miss_never_helps(self, n_det, n_gt, seed):
        rng = np.random.default_rng(seed)
        scores = rng.random(n_det) + 0.1
        overlaps = rng.random((n_det, n_gt))
        before = average_precision(scores, overlaps)
        after = average_precision(np.append(scores, 0.0), np.vstack([overlaps, np.zeros(n_gt)]))
        assert after <= before


class TestVideoAndFrameAp:
    def test_perfect_video_ap(self):
        ap = video_ap([tube(0, 9)], [gt(0, 9)])
        assert ap == {1: 1.0}

    def test_tube_in_wrong_video_misses(self):
        assert video_ap([tube(0, 9, video="w")], [gt(0, 9)]) == {1: 0.0}

    def test_classes_without_ground_truth_are_excluded(self):
        ap = video_ap([tube(0, 9), tube(0, 9, cls=2)], [gt(0, 9)])
        assert set(ap) == {1}
        assert mean_ap(ap) == 1.0

    def test_mean_ap_of_nothing_is_nan(self):
        assert math.isnan(mean_ap({}))

    def test_frame_ap_counts_frames(self):
        # Ten GT frames; the tube covers five of them exactly and five empty frames.
        ap = frame_ap([tube(5, 14)], [gt(0, 9)])
        assert ap[1] == pytest.approx(pr_oracle([1] * 5 + [0] * 5, 10))

    def test_frame_ap_per_frame_scores(self):
        t = ActionTube(1, 0, 1, np.array([FAR, A]), [0.9, 0.2], 0.55, "v")
        ap = frame_ap([t], [gt(0, 1)])
        assert ap[1] == pytest.approx(pr_oracle([0, 1], 2))

    def test_round_trip_record(self):
        g = gt(2, 4)
        back = GroundTruthTube.from_record(g.to_record())
        np.testing.assert_array_equal(back.boxes, g.boxes)
        assert (back.start, back.end, back.class_id) == (2, 4, 1)

    def test_box_count_must_match_span(self):
        with pytest.raises(ValueError):
            GroundTruthTube("v", 1, 0, 3, [A])


def test_box_strategy_is_valid():
    assert Box(0, 0, 1, 1).area == 1.0
