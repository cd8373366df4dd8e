import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracle_checks
import oracles
from armsearch.boxes import (Box, Detection, assign_targets, box_iou, clip_boxes, decode, encode, iou,
                             nms, nms_indices)
from armsearch.roi import roi_align, sampling_matrix
from armsearch.tensor import Tensor, precision


class TestIou:
    def test_self(self):
        assert iou((1, 2, 5, 9), (1, 2, 5, 9)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
        assert iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0  # touching edge

    def test_half_overlap(self):
        assert abs(iou((0, 0, 10, 10), (5, 0, 15, 10)) - 1 / 3) < 1e-15

    def test_matrix_matches_scalar(self):
        rng = np.random.default_rng(0)
        boxes = np.array(oracle_checks.random_boxes(rng, 6))
        mat = box_iou(boxes, boxes[:4])
        for i in range(6):
            for j in range(4):
                assert mat[i, j] == iou(boxes[i], boxes[j])

    def test_random_against_raster(self):
        assert oracle_checks.check_iou(np.random.default_rng(1), 100) == 0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 40), min_size=8, max_size=8))
    def test_symmetric_and_bounded(self, v):
        a = (v[0], v[1], v[0] + v[2] + 1, v[1] + v[3] + 1)
        b = (v[4], v[5], v[4] + v[6] + 1, v[5] + v[7] + 1)
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0


class TestBox:
    def test_degenerate(self):
        with pytest.raises(ValueError):
            Box(0, 0, 0, 5)

    def test_area_and_scale(self):
        b = Box(1, 2, 4, 6)
        assert b.area == 12 and tuple(b.scaled(2)) == (2, 4, 8, 12)


class TestNms:
    def test_single(self):
        d = Detection(Box(0, 0, 1, 1), 0.3)
        assert nms([d]) == [d]

    def test_overlap_above_threshold(self):
        # iou 0.5 > 0.4, the lower score goes
        a = Detection(Box(0, 0, 10, 10), 0.9)
        b = Detection(Box(0, 0, 10, 5), 0.8)
        assert iou(tuple(a.box), tuple(b.box)) == 0.5
        assert nms([b, a]) == [a]

    def test_output_sorted_and_ties_by_index(self):
        boxes = np.array([[0, 0, 1, 1], [5, 5, 6, 6], [0, 0, 1, 1], [9, 9, 10, 10]], dtype=float)
        assert nms_indices(boxes, np.array([0.5, 0.9, 0.5, 0.5])).tolist() == [1, 0, 3]

    def test_empty(self):
        assert nms([]) == []

    def test_threshold_domain(self):
        with pytest.raises(ValueError):
            nms_indices(np.zeros((1, 4)), np.zeros(1), 1.0)

    def test_random_against_brute_force(self):
        assert oracle_checks.check_nms(np.random.default_rng(2), 150) == 0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_kept_boxes_do_not_overlap(self, seed):
        rng = np.random.default_rng(seed)
        boxes = np.array(oracle_checks.random_boxes(rng, 8, extent=8.0))
        keep = nms_indices(boxes, rng.uniform(size=8))
        ov = box_iou(boxes[keep], boxes[keep])
        np.fill_diagonal(ov, 0)
        assert ov.max(initial=0) <= 0.4


class TestAssign:
    def test_foreground_and_background(self):
        gt = [(0, 0, 10, 10)]
        fg = (0, 0, 10, 6)      # iou 0.6
        bg = (0, 0, 10, 3)      # iou 0.3
        t = assign_targets(np.array([fg, bg]), np.array(gt))
        assert t.labels.tolist() == [1, 0]
        assert t.matched_gt.tolist() == [0, -1]

    def test_identical_proposal_zero_target(self):
        t = assign_targets(np.array([[2.0, 3.0, 7.0, 9.0]]), np.array([[2.0, 3.0, 7.0, 9.0]]), [5])
        np.testing.assert_array_equal(t.regression, np.zeros((1, 4)))
        assert t.identities.tolist() == [5]

    def test_tie_goes_to_lowest_index(self):
        gts = np.array([[0, 0, 10, 10], [0, 0, 10, 10]], dtype=float)
        assert assign_targets(np.array([[0, 0, 10, 10.0]]), gts).matched_gt.tolist() == [0]

    def test_no_gts(self):
        t = assign_targets(np.array([[0, 0, 1, 1.0]]), np.zeros((0, 4)))
        assert t.labels.tolist() == [0] and t.matched_gt.tolist() == [-1]

    def test_random_against_brute_force(self):
        assert oracle_checks.check_assign(np.random.default_rng(3), 150) == 0

    def test_gt_permutation_stability(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            gts = np.array(oracle_checks.random_boxes(rng, 4, extent=10.0))
            props = np.array(oracle_checks.random_boxes(rng, 8, extent=10.0))
            perm = rng.permutation(4)
            a, b = assign_targets(props, gts), assign_targets(props, gts[perm])
            np.testing.assert_array_equal(a.labels, b.labels)
            np.testing.assert_array_equal(a.max_iou, b.max_iou)
            fg = a.labels == 1
            # matched boxes agree unless two GTs tie exactly
            np.testing.assert_array_equal(gts[a.matched_gt[fg]], gts[perm][b.matched_gt[fg]])


class TestDeltas:
    def test_round_trip(self):
        rng = np.random.default_rng(5)
        props = np.array(oracle_checks.random_boxes(rng, 10))
        gts = np.array(oracle_checks.random_boxes(rng, 10))
        np.testing.assert_allclose(decode(props, encode(props, gts)), gts, atol=1e-9)

    def test_known_deltas(self):
        d = encode(np.array([[0.0, 0.0, 2.0, 4.0]]), np.array([[1.0, 0.0, 3.0, 8.0]]))
        np.testing.assert_allclose(d, [[0.5, 0.5, 0.0, math.log(2)]])

    def test_clip_keeps_boxes_valid(self):
        out = clip_boxes(np.array([[-5.0, -5.0, 200.0, 2.0], [99.5, 10, 120, 11]]), 100, 50)
        assert (out[:, 2] - out[:, 0] >= 1).all() and (out[:, 3] - out[:, 1] >= 1).all()
        assert out.min() >= 0 and out[:, 2].max() <= 100


class TestRoiAlign:
    def test_constant_map(self):
        fm = Tensor(np.full((3, 9, 11), 2.5))
        out = roi_align(fm, (1.3, 0.4, 7.9, 8.2), 5).data
        np.testing.assert_allclose(out, 2.5, atol=1e-6)

    def test_integer_aligned_box(self):
        rng = np.random.default_rng(6)
        fm = rng.normal(size=(2, 8, 8))
        with precision(np.float64):
            out = roi_align(Tensor(fm), (2.0, 1.0, 6.0, 5.0), 4).data
        np.testing.assert_allclose(out, oracles.roi_align(fm, (2, 1, 6, 5), 4), atol=1e-12)

    def test_random_against_oracle(self):
        assert oracle_checks.check_roi_align(np.random.default_rng(7), 100) == 0

    def test_output_shapes(self):
        fm = Tensor(np.zeros((2, 4, 8, 8)))
        assert roi_align(fm, np.array([[0, 0, 4, 4.0]] * 3), 7, batch_index=[0, 1, 1]).shape == (3, 4, 7, 7)
        assert roi_align(Tensor(np.zeros((4, 8, 8))), (0, 0, 4, 4), 7).shape == (4, 7, 7)

    def test_batch_index_selects_map(self):
        fm = np.stack([np.zeros((1, 6, 6)), np.ones((1, 6, 6))])
        out = roi_align(Tensor(fm), np.array([[1, 1, 4, 4.0]] * 2), 2, batch_index=[1, 0]).data
        assert out[0].min() == 1.0 and out[1].max() == 0.0

    def test_degenerate_box(self):
        with pytest.raises(ValueError):
            sampling_matrix((3, 3, 3, 8), 8, 8, 2, 2)

    def test_rows_are_averaging_weights(self):
        # boxes inside the map: every output is a convex combination
        m = sampling_matrix((1.0, 1.5, 6.0, 5.0), 8, 8, 3, 3)
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)
        assert m.min() >= 0
