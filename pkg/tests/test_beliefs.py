"""Ideal belief maps, stack utilities, merging, extraction."""

import math

import numpy as np
import pytest

from posecascade.beliefs import (
    BeliefStack,
    Keypoints,
    center_map,
    extract_keypoints,
    ideal_beliefs,
    load_stack_blob,
    merge_scales,
    save_stack_blob,
    stack_to_pngs,
)

STRIDE = 4
MAP = (12, 12)


def grid_point(col, row, stride=STRIDE):
    """Image coordinates of heatmap cell (row, col) under the cell-center rule."""
    return (col * stride + stride / 2.0, row * stride + stride / 2.0)


class TestIdealBeliefs:
    def test_peak_is_exactly_one_at_grid_aligned_point(self):
        kps = Keypoints.from_coords([grid_point(3, 5)])
        stack = ideal_beliefs(kps, sigma=2.0, stride=STRIDE, map_size=MAP)
        assert stack.scores[0, 5, 3] == pytest.approx(1.0, abs=0.0)
        assert stack.scores[0].max() == pytest.approx(1.0)

    def test_value_at_sigma_distance(self):
        # stride 1: a cell one sigma away along one axis scores exp(-1/2)
        sigma = 3.0
        kps = Keypoints.from_coords([grid_point(5, 5, stride=1)])
        stack = ideal_beliefs(kps, sigma=sigma, stride=1, map_size=(16, 16))
        assert stack.scores[0, 5, 8] == pytest.approx(math.exp(-0.5), rel=1e-6)

    def test_two_people_elementwise_max(self):
        a = Keypoints.from_coords([grid_point(2, 2)])
        b = Keypoints.from_coords([grid_point(8, 7)])
        merged = ideal_beliefs([a, b], sigma=3.0, stride=STRIDE, map_size=MAP,
                               mode="all_people")
        only_a = ideal_beliefs(a, sigma=3.0, stride=STRIDE, map_size=MAP)
        only_b = ideal_beliefs(b, sigma=3.0, stride=STRIDE, map_size=MAP)
        np.testing.assert_allclose(
            merged.scores[0], np.maximum(only_a.scores[0], only_b.scores[0]),
            rtol=0, atol=0)

    def test_primary_only_mode(self):
        a = Keypoints.from_coords([grid_point(2, 2)])
        b = Keypoints.from_coords([grid_point(8, 7)])
        primary = ideal_beliefs([a, b], sigma=3.0, stride=STRIDE, map_size=MAP,
                                mode="primary_only")
        only_a = ideal_beliefs(a, sigma=3.0, stride=STRIDE, map_size=MAP)
        np.testing.assert_array_equal(primary.scores, only_a.scores)

    def test_absent_part_gives_zero_channel(self):
        kps = Keypoints.from_coords([grid_point(2, 2), None])
        stack = ideal_beliefs(kps, sigma=2.0, stride=STRIDE, map_size=MAP)
        assert np.all(stack.scores[1] == 0.0)

    def test_background_complements_parts(self):
        kps = Keypoints.from_coords([grid_point(4, 4), grid_point(9, 2)])
        stack = ideal_beliefs(kps, sigma=2.5, stride=STRIDE, map_size=MAP)
        bg = stack.background()
        assert bg.min() >= 0.0 and bg.max() <= 1.0
        parts_max = stack.part_channels().max(axis=0)
        np.testing.assert_allclose(bg, np.maximum(0.0, 1.0 - parts_max),
                                   rtol=0, atol=1e-7)
        assert bg[np.isclose(parts_max, 0.0, atol=1e-12)].min() == pytest.approx(1.0)

    def test_translation_equivariance_on_grid_shifts(self):
        sigma = 2.0
        base = Keypoints.from_coords([grid_point(3, 3)])
        shifted = Keypoints.from_coords([grid_point(5, 6)])  # shift (2, 3) cells
        s_base = ideal_beliefs(base, sigma, STRIDE, MAP).scores[0]
        s_shift = ideal_beliefs(shifted, sigma, STRIDE, MAP).scores[0]
        # interior agreement: shifted map equals base map moved by (3 rows, 2 cols)
        np.testing.assert_allclose(s_shift[3:, 2:], s_base[:-3, :-2], rtol=0, atol=1e-7)

    def test_bad_sigma_rejected(self):
        with pytest.raises(ValueError, match="sigma"):
            ideal_beliefs(Keypoints.from_coords([grid_point(1, 1)]), 0.0, STRIDE, MAP)


class TestCenterMap:
    def test_peak_at_grid_point(self):
        cm = center_map(grid_point(4, 6), sigma=3.0, size=MAP, stride=STRIDE)
        assert cm.shape == (1, *MAP)
        assert cm[0, 6, 4] == pytest.approx(1.0)

    def test_symmetric_center_flip_symmetry(self):
        h, w = 10, 10
        center = (w * STRIDE / 2.0, h * STRIDE / 2.0)
        cm = center_map(center, sigma=4.0, size=(h, w), stride=STRIDE)[0]
        np.testing.assert_allclose(cm, cm[:, ::-1], rtol=0, atol=1e-7)

    def test_matches_per_cell_closed_form(self):
        sigma, point = 2.5, (13.0, 7.0)
        cm = center_map(point, sigma=sigma, size=(6, 8), stride=STRIDE)[0]
        for r in range(6):
            for c in range(8):
                u, v = grid_point(c, r)
                expected = math.exp(-((u - point[0]) ** 2 + (v - point[1]) ** 2)
                                    / (2 * sigma * sigma))
                assert cm[r, c] == pytest.approx(expected, rel=1e-5)


class TestMergeScales:
    def _stack(self, seed, size=(6, 6), channels=3):
        rng = np.random.default_rng(seed)
        return BeliefStack(scores=rng.random((channels, *size)).astype(np.float32))

    def test_single_stack_unchanged(self):
        s = self._stack(0)
        out = merge_scales([s], [1.0])
        np.testing.assert_array_equal(out.scores, s.scores)

    def test_identical_stacks_identical_result(self):
        s = self._stack(1)
        out = merge_scales([s, s, s], [1.0, 1.0, 1.0])
        np.testing.assert_allclose(out.scores, s.scores, rtol=0, atol=1e-7)

    def test_same_grid_elementwise_mean(self):
        a = BeliefStack(scores=np.array([[[0.0, 1.0], [0.5, 0.25]]], dtype=np.float32))
        b = BeliefStack(scores=np.array([[[1.0, 0.0], [0.5, 0.75]]], dtype=np.float32))
        out = merge_scales([a, b], [1.0, 1.0])
        np.testing.assert_allclose(
            out.scores, np.array([[[0.5, 0.5], [0.5, 0.5]]]), atol=1e-7)

    def test_commutative_in_order(self):
        a, b, c = self._stack(2), self._stack(3, size=(12, 12)), self._stack(4)
        out1 = merge_scales([a, b, c], [1.0, 2.0, 1.0])
        out2 = merge_scales([c, a, b], [1.0, 1.0, 2.0])
        np.testing.assert_allclose(out1.scores, out2.scores, atol=1e-6)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            merge_scales([], [])


class TestExtractKeypoints:
    def test_recovers_gaussian_peak_cell(self):
        kps = Keypoints.from_coords([grid_point(7, 2)])
        stack = ideal_beliefs(kps, sigma=2.0, stride=STRIDE, map_size=MAP)
        out = extract_keypoints(stack, STRIDE)
        np.testing.assert_allclose(out.xy[0], grid_point(7, 2))

    def test_constant_channel_tie_breaks_to_origin(self):
        scores = np.ones((2, 5, 5), dtype=np.float32)
        out = extract_keypoints(BeliefStack(scores=scores), STRIDE)
        np.testing.assert_allclose(out.xy[0], grid_point(0, 0))

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(12)
        scores = rng.random((4, 9, 7)).astype(np.float32)
        out = extract_keypoints(BeliefStack(scores=scores), STRIDE)
        for p in range(3):
            best, best_val = None, -np.inf
            for r in range(9):
                for c in range(7):
                    if scores[p, r, c] > best_val:
                        best_val = scores[p, r, c]
                        best = (c, r)
            np.testing.assert_allclose(out.xy[p], grid_point(*best))

    def test_roundtrip_with_ideal_beliefs_well_separated(self):
        # parts separated by more than 6 sigma recover exactly
        sigma = 1.5
        coords = [grid_point(1, 1), grid_point(9, 2), grid_point(4, 10)]
        kps = Keypoints.from_coords(coords)
        stack = ideal_beliefs(kps, sigma, STRIDE, MAP)
        out = extract_keypoints(stack, STRIDE)
        np.testing.assert_allclose(out.xy, kps.xy)


class TestExport:
    def test_blob_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        stack = BeliefStack(scores=rng.random((3, 4, 5)).astype(np.float32))
        path = tmp_path / "stack.beliefs"
        save_stack_blob(stack, path)
        loaded = load_stack_blob(path)
        np.testing.assert_array_equal(loaded.scores, stack.scores)

    def test_png_export(self, tmp_path):
        from PIL import Image

        stack = BeliefStack(scores=np.linspace(0, 1, 2 * 4 * 4,
                                               dtype=np.float32).reshape(2, 4, 4))
        paths = stack_to_pngs(stack, tmp_path, prefix="part")
        assert len(paths) == 2
        img = Image.open(paths[0])
        assert img.size == (4, 4) and img.mode == "L"
