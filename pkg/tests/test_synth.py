"""Synthetic figure generation, augmentation, training pairs, manifests."""

import math

import numpy as np
import pytest

from posecascade.receptive import design_default_specs
from posecascade.synth import (
    Bone,
    DataConfig,
    GenConfig,
    PoseSample,
    Skeleton,
    SynthDataset,
    apply_affine,
    augment,
    default_skeleton,
    make_training_pair,
    read_manifest,
    sample_pose,
    write_manifest,
)

CANVAS = (64, 64)


class TestSkeleton:
    def test_default_is_connected_tree_with_five_parts(self):
        sk = default_skeleton()
        assert len(sk.labeled) == 5
        assert sk.flip_permutation() != list(range(5))  # l/r pair present

    def test_bad_tree_rejected(self):
        with pytest.raises(ValueError, match="parent not yet defined"):
            Skeleton(root="a", bones=(Bone("missing", "b", (1, 2), (0, 10)),),
                     labeled=("a",))
        with pytest.raises(ValueError, match="twice"):
            Skeleton(root="a",
                     bones=(Bone("a", "b", (1, 2), (0, 10)),
                            Bone("a", "b", (1, 2), (0, 10))),
                     labeled=("a",))

    def test_sampled_bone_lengths_within_ranges(self):
        sk = default_skeleton()
        lengths = {b.child: b.length for b in sk.bones}
        sample, strokes = sample_pose(123, sk, CANVAS, with_geometry=True)
        scale_hi = GenConfig().figure_scale[1]
        for s in strokes:
            if s.kind != "segment" or s.joint is None or s.joint not in lengths:
                continue
            lo, hi = lengths[s.joint]
            length = math.dist(s.p0, s.p1)
            assert lo * 0.5 <= length <= hi * scale_hi * 1.01


class TestSamplePose:
    def test_same_seed_bitwise_identical(self):
        a = sample_pose(42, canvas=CANVAS)
        b = sample_pose(42, canvas=CANVAS)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.keypoints.xy, b.keypoints.xy)
        assert a.center == b.center and a.scale == b.scale

    def test_different_seeds_differ(self):
        a = sample_pose(1, canvas=CANVAS)
        b = sample_pose(2, canvas=CANVAS)
        assert not np.array_equal(a.image, b.image)

    def test_zero_clutter_background_exact(self):
        gen = GenConfig(clutter_count=(0, 0), second_figure_prob=0.0)
        sample, strokes = sample_pose(7, canvas=CANVAS, gen=gen, with_geometry=True)
        img = sample.image[0]
        # mask out every stroke's reach; the rest must equal the background
        off = np.ones_like(img, dtype=bool)
        ys, xs = np.mgrid[0:CANVAS[0], 0:CANVAS[1]]
        us, vs = xs + 0.5, ys + 0.5
        for s in strokes:
            p0 = np.array(s.p0)
            p1 = np.array(s.p1)
            reach = (s.thickness if s.kind == "circle" else s.thickness / 2) + 1.0
            seg = p1 - p0
            denom = float(seg @ seg)
            if denom == 0.0:
                dist = np.hypot(us - p0[0], vs - p0[1])
            else:
                t = np.clip(((us - p0[0]) * seg[0] + (vs - p0[1]) * seg[1]) / denom, 0, 1)
                dist = np.hypot(us - p0[0] - t * seg[0], vs - p0[1] - t * seg[1])
            off &= dist > reach
        assert off.sum() > 0
        assert np.all(img[off] == np.float32(sample.background))

    def test_keypoints_match_rendered_geometry(self):
        # re-measure each labeled part from the stroke endpoints actually drawn
        sk = default_skeleton()
        root_children = {b.child for b in sk.bones if b.parent == sk.root}
        for seed in (3, 11, 29):
            sample, strokes = sample_pose(seed, sk, CANVAS, with_geometry=True)
            by_joint = {}
            for s in strokes:
                if s.joint is None:
                    continue
                point = s.p0 if s.kind == "circle" else s.p1
                by_joint.setdefault(s.joint, point)
                if s.kind == "segment" and s.joint in root_children:
                    by_joint.setdefault(sk.root, s.p0)  # proximal end is the root
            for i, name in enumerate(sample.parts):
                if not sample.keypoints.present[i]:
                    continue
                measured = by_joint[name]
                assert math.dist(measured, sample.keypoints.xy[i]) <= 0.5

    def test_keypoints_inside_canvas(self):
        for seed in range(20):
            sample = sample_pose(seed, canvas=CANVAS)
            pts = sample.keypoints.xy[sample.keypoints.present]
            assert np.all(pts >= 0)
            assert np.all(pts[:, 0] < CANVAS[1]) and np.all(pts[:, 1] < CANVAS[0])
            assert 0 <= sample.center[0] < CANVAS[1]
            assert 0 <= sample.center[1] < CANVAS[0]

    def test_canvas_too_small_rejected(self):
        with pytest.raises(ValueError, match="too small"):
            sample_pose(0, canvas=(10, 10))


class TestAugment:
    def test_identity_augmentation_unchanged(self):
        sample = sample_pose(5, canvas=CANVAS)
        out = apply_affine(sample, rotation_deg=0.0, scale=1.0, flip=False)
        np.testing.assert_allclose(out.image, sample.image, atol=1e-6)
        np.testing.assert_allclose(out.keypoints.xy, sample.keypoints.xy, atol=1e-9)

    def test_rotation_90_convention(self):
        # +90 degrees turns +u toward +v: (c+d, c) lands on (c, c+d)
        sample = sample_pose(5, canvas=CANVAS)
        c = CANVAS[0] / 2.0
        d = 10.0
        sample.keypoints.xy[0] = (c + d, c)
        sample.keypoints.present[:] = True
        out = apply_affine(sample, rotation_deg=90.0, scale=1.0, flip=False)
        np.testing.assert_allclose(out.keypoints.xy[0], (c, c + d), atol=1e-9)

    def test_flip_swaps_left_right_labels(self):
        sample = sample_pose(8, canvas=CANVAS)
        parts = list(sample.parts)
        li, ri = parts.index("l_elbow"), parts.index("r_elbow")
        out = apply_affine(sample, 0.0, 1.0, flip=True)
        w = CANVAS[1]
        np.testing.assert_allclose(out.keypoints.xy[li, 0],
                                   w - sample.keypoints.xy[ri, 0], atol=1e-9)
        np.testing.assert_allclose(out.keypoints.xy[li, 1],
                                   sample.keypoints.xy[ri, 1], atol=1e-9)

    def test_flip_twice_is_identity(self):
        sample = sample_pose(9, canvas=CANVAS)
        out = apply_affine(apply_affine(sample, 0.0, 1.0, True), 0.0, 1.0, True)
        assert np.all(np.abs(out.keypoints.xy - sample.keypoints.xy) <= 0.5)
        np.testing.assert_array_equal(out.keypoints.present, sample.keypoints.present)

    def test_keypoints_exact_affine_image(self):
        sample = sample_pose(10, canvas=CANVAS)
        theta, f = 33.0, 1.2
        out = apply_affine(sample, theta, f, flip=False)
        c = np.array([CANVAS[1] / 2, CANVAS[0] / 2])
        t = math.radians(theta)
        rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        expected = (sample.keypoints.xy - c) @ (f * rot).T + c
        np.testing.assert_allclose(out.keypoints.xy, expected, atol=1e-4)

    def test_out_of_bounds_marked_absent(self):
        sample = sample_pose(12, canvas=CANVAS)
        out = apply_affine(sample, 0.0, 2.5, flip=False)  # blow up beyond canvas
        assert not out.keypoints.present.all()
        gone = [name for name, ok in zip(out.parts, out.keypoints.present) if not ok]
        assert set(gone) <= out.occluded_parts

    def test_augment_deterministic_per_seed(self):
        sample = sample_pose(13, canvas=CANVAS)
        a = augment(sample, 99)
        b = augment(sample, 99)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.keypoints.xy, b.keypoints.xy)


class TestTrainingPair:
    def spec(self):
        return design_default_specs(5, CANVAS, 24, 13, stages=2, heatmap_stride=4,
                                    base_width=2, context_width=3)

    def test_single_figure_same_targets(self):
        gen = GenConfig(second_figure_prob=0.0)
        sample = sample_pose(20, canvas=CANVAS, gen=gen)
        pair = make_training_pair(sample, self.spec(), sigma=4.0)
        np.testing.assert_array_equal(pair.stage1_targets.scores,
                                      pair.later_targets.scores)

    def test_two_figures_stage1_dominates(self):
        gen = GenConfig(second_figure_prob=1.0)
        found = False
        for seed in range(40):
            sample = sample_pose(seed, canvas=CANVAS, gen=gen)
            if sample.extra_people:
                found = True
                pair = make_training_pair(sample, self.spec(), sigma=4.0)
                parts1 = pair.stage1_targets.part_channels()
                parts2 = pair.later_targets.part_channels()
                assert np.all(parts1 >= parts2 - 1e-7)
                assert parts1.max() > parts2.max() - 1e-7
                break
        assert found, "no two-figure sample generated in 40 seeds"

    def test_absent_part_zero_channel_in_both(self):
        sample = sample_pose(21, canvas=CANVAS, gen=GenConfig(second_figure_prob=0.0))
        sample.keypoints.present[0] = False
        pair = make_training_pair(sample, self.spec(), sigma=4.0)
        assert np.all(pair.stage1_targets.scores[0] == 0.0)
        assert np.all(pair.later_targets.scores[0] == 0.0)

    def test_center_map_shape(self):
        sample = sample_pose(22, canvas=CANVAS)
        spec = self.spec()
        pair = make_training_pair(sample, spec, sigma=4.0)
        assert pair.center.shape == (1, *spec.heatmap_size)


class TestDatasetManifest:
    def test_manifest_roundtrip_and_idempotence(self, tmp_path):
        cfg = DataConfig(count=5, seed=77, canvas=CANVAS)
        m1 = write_manifest(tmp_path / "a.json", cfg)
        m2 = write_manifest(tmp_path / "b.json", cfg)
        assert m1 == m2
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        loaded_cfg, seeds = read_manifest(tmp_path / "a.json")
        assert loaded_cfg == cfg
        assert len(seeds) == 5

    def test_dataset_regeneration_bitwise(self, tmp_path):
        cfg = DataConfig(count=4, seed=5, canvas=CANVAS)
        write_manifest(tmp_path / "m.json", cfg)
        a = SynthDataset.from_manifest(tmp_path / "m.json")
        b = SynthDataset.from_manifest(tmp_path / "m.json")
        for i in range(len(a)):
            assert np.array_equal(a.base(i).image, b.base(i).image)

    def test_sample_count_matches_config(self):
        cfg = DataConfig(count=9, seed=1, canvas=CANVAS)
        assert len(SynthDataset(cfg)) == 9

    def test_png_materialization(self, tmp_path):
        cfg = DataConfig(count=2, seed=3, canvas=(32, 32),
                         gen=GenConfig(figure_scale=(0.45, 0.55), margin=2.0))
        paths = SynthDataset(cfg).save_pngs(tmp_path)
        assert len(paths) == 2
        from PIL import Image

        assert Image.open(paths[0]).size == (32, 32)
