"""Synthetic articulated stick figures with exact keypoint ground truth.

Figures are kinematic trees rendered as anti-aliased strokes on a grayscale
canvas, with distractor strokes whose endpoints are locally indistinguishable
from real limb endpoints, and an optional second (smaller) figure.  Both
ambiguity sources are deliberate: predictions from local evidence alone are
unreliable, so later stages have something to fix.

Conventions (shared with :mod:`posecascade.beliefs`): continuous coordinates
(u, v) with pixel k spanning [k, k+1); v grows downward.  Bone angles are
measured in the (u, v) plane from the +u axis, so +90 degrees points down the
image.  Positive rotation turns +u toward +v (clockwise on screen).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .beliefs import BeliefStack, Keypoints, center_map, ideal_beliefs


@dataclass(frozen=True)
class Bone:
    parent: str
    child: str
    length: Tuple[float, float]
    angle_deg: Tuple[float, float]


def _flip_permutation(parts: Sequence[str]) -> List[int]:
    names = list(parts)
    perm = list(range(len(names)))
    for i, name in enumerate(names):
        if name.startswith("l_"):
            twin = "r_" + name[2:]
            if twin in names:
                j = names.index(twin)
                perm[i], perm[j] = j, i
    return perm


@dataclass(frozen=True)
class Skeleton:
    """Kinematic tree; ``labeled`` names the P annotated parts, in order."""

    root: str
    bones: Tuple[Bone, ...]
    labeled: Tuple[str, ...]

    def __post_init__(self):
        joints = {self.root}
        for bone in self.bones:
            if bone.parent not in joints:
                raise ValueError(f"bone {bone.parent}->{bone.child}: parent not yet defined "
                                 "(bones must be listed in tree order)")
            if bone.child in joints:
                raise ValueError(f"joint '{bone.child}' defined twice (tree must be acyclic)")
            joints.add(bone.child)
        missing = [p for p in self.labeled if p not in joints]
        if missing:
            raise ValueError(f"labeled parts {missing} are not joints of the tree")

    @property
    def parts(self) -> Tuple[str, ...]:
        return self.labeled

    def flip_permutation(self) -> List[int]:
        """Index permutation swapping l_/r_ counterpart labels."""
        return _flip_permutation(self.labeled)


def default_skeleton() -> Skeleton:
    """Five labeled parts: head, neck, left/right elbow analogs, ankle analog."""
    return Skeleton(
        root="neck",
        bones=(
            Bone("neck", "head", length=(6.5, 9.5), angle_deg=(-120.0, -60.0)),
            Bone("neck", "l_elbow", length=(10.0, 15.0), angle_deg=(100.0, 260.0)),
            Bone("neck", "r_elbow", length=(10.0, 15.0), angle_deg=(-80.0, 80.0)),
            Bone("neck", "hip", length=(8.0, 12.0), angle_deg=(65.0, 115.0)),
            Bone("hip", "ankle", length=(8.0, 13.0), angle_deg=(45.0, 135.0)),
        ),
        labeled=("head", "neck", "l_elbow", "r_elbow", "ankle"),
    )


@dataclass(frozen=True)
class GenConfig:
    """Rendering and sampling ranges for the generator."""

    background: Tuple[float, float] = (0.05, 0.22)
    foreground: Tuple[float, float] = (0.75, 1.0)
    thickness: Tuple[float, float] = (1.2, 1.8)
    head_radius: Tuple[float, float] = (2.2, 3.2)
    orientation_deg: Tuple[float, float] = (-25.0, 25.0)
    figure_scale: Tuple[float, float] = (0.85, 1.15)
    clutter_count: Tuple[int, int] = (1, 3)
    clutter_length: Tuple[float, float] = (6.0, 16.0)
    second_figure_prob: float = 0.15
    second_figure_scale: Tuple[float, float] = (0.55, 0.75)
    margin: float = 3.0


@dataclass(frozen=True)
class Stroke:
    """One rendered primitive; ``joint`` tags the distal joint, if any."""

    kind: str                      # "segment" or "circle"
    p0: Tuple[float, float]
    p1: Tuple[float, float]        # circle: p1 == p0
    thickness: float               # circle: radius
    intensity: float
    joint: Optional[str] = None


@dataclass
class PoseSample:
    """One rendered figure with ground truth, center and scale estimates."""

    image: np.ndarray                     # (1, H, W) float32
    keypoints: Keypoints                  # primary figure, labeled parts
    center: Tuple[float, float]
    scale: float                          # max side of the primary keypoint bbox
    occluded_parts: frozenset
    parts: Tuple[str, ...]
    extra_people: Tuple[Keypoints, ...] = ()
    background: float = 0.0


def _rot(theta_deg: float) -> np.ndarray:
    t = math.radians(theta_deg)
    return np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])


def _figure_joints(rng: np.random.Generator, skeleton: Skeleton,
                   orientation_deg: float, scale: float) -> Dict[str, np.ndarray]:
    """Sample bone lengths/angles and place joints around the root at origin."""
    joints = {skeleton.root: np.zeros(2)}
    rot = _rot(orientation_deg)
    for bone in skeleton.bones:
        length = rng.uniform(*bone.length) * scale
        angle = math.radians(rng.uniform(*bone.angle_deg))
        direction = np.array([math.cos(angle), math.sin(angle)])
        joints[bone.child] = joints[bone.parent] + length * (rot @ direction)
    return joints


def _place(rng: np.random.Generator, joints: Dict[str, np.ndarray],
           canvas: Tuple[int, int], margin: float,
           pad: float) -> Optional[Dict[str, np.ndarray]]:
    """Translate the figure to a uniformly random fully-in-canvas position."""
    h, w = canvas
    pts = np.stack(list(joints.values()))
    lo = pts.min(axis=0) - pad
    hi = pts.max(axis=0) + pad
    u_lo, u_hi = margin - lo[0], w - margin - hi[0]
    v_lo, v_hi = margin - lo[1], h - margin - hi[1]
    if u_hi < u_lo or v_hi < v_lo:
        return None
    root = np.array([rng.uniform(u_lo, u_hi), rng.uniform(v_lo, v_hi)])
    return {name: p + root for name, p in joints.items()}


def _figure_strokes(rng: np.random.Generator, skeleton: Skeleton,
                    joints: Dict[str, np.ndarray], gen: GenConfig) -> List[Stroke]:
    strokes = []
    thickness = rng.uniform(*gen.thickness)
    for bone in skeleton.bones:
        intensity = rng.uniform(*gen.foreground)
        strokes.append(Stroke("segment", tuple(joints[bone.parent]),
                              tuple(joints[bone.child]), thickness, intensity,
                              joint=bone.child))
    radius = rng.uniform(*gen.head_radius)
    intensity = rng.uniform(*gen.foreground)
    if "head" in joints:
        strokes.append(Stroke("circle", tuple(joints["head"]), tuple(joints["head"]),
                              radius, intensity, joint="head"))
    return strokes


def _render(strokes: Sequence[Stroke], canvas: Tuple[int, int], background: float) -> np.ndarray:
    h, w = canvas
    img = np.full((h, w), background, dtype=np.float32)
    for s in strokes:
        p0 = np.asarray(s.p0, dtype=np.float64)
        p1 = np.asarray(s.p1, dtype=np.float64)
        reach = (s.thickness if s.kind == "circle" else s.thickness / 2.0) + 1.5
        u_min = max(int(math.floor(min(p0[0], p1[0]) - reach)), 0)
        u_max = min(int(math.ceil(max(p0[0], p1[0]) + reach)), w)
        v_min = max(int(math.floor(min(p0[1], p1[1]) - reach)), 0)
        v_max = min(int(math.ceil(max(p0[1], p1[1]) + reach)), h)
        if u_min >= u_max or v_min >= v_max:
            continue
        us = np.arange(u_min, u_max) + 0.5
        vs = np.arange(v_min, v_max) + 0.5
        du = us[None, :] - p0[0]
        dv = vs[:, None] - p0[1]
        if s.kind == "circle":
            dist = np.sqrt(du ** 2 + dv ** 2)
            coverage = np.clip(s.thickness + 0.5 - dist, 0.0, 1.0)
        else:
            seg = p1 - p0
            seg_len2 = float(seg @ seg)
            if seg_len2 == 0.0:
                dist = np.sqrt(du ** 2 + dv ** 2)
            else:
                t = np.clip((du * seg[0] + dv * seg[1]) / seg_len2, 0.0, 1.0)
                dist = np.sqrt((du - t * seg[0]) ** 2 + (dv - t * seg[1]) ** 2)
            coverage = np.clip(s.thickness / 2.0 + 0.5 - dist, 0.0, 1.0)
        value = background + coverage * (s.intensity - background)
        patch = img[v_min:v_max, u_min:u_max]
        np.maximum(patch, value.astype(np.float32), out=patch)
    return img


def _labeled_keypoints(skeleton: Skeleton, joints: Dict[str, np.ndarray],
                       canvas: Tuple[int, int]) -> Keypoints:
    h, w = canvas
    xy = np.zeros((len(skeleton.labeled), 2))
    present = np.zeros(len(skeleton.labeled), dtype=bool)
    for i, name in enumerate(skeleton.labeled):
        p = joints[name]
        xy[i] = p
        present[i] = (0.0 <= p[0] < w) and (0.0 <= p[1] < h)
    return Keypoints(xy, present)


def sample_pose(rng_seed: int, skeleton: Optional[Skeleton] = None,
                canvas: Tuple[int, int] = (64, 64),
                gen: Optional[GenConfig] = None,
                with_geometry: bool = False):
    """Deterministically render one sample (and optionally its stroke geometry)."""
    skeleton = skeleton or default_skeleton()
    gen = gen or GenConfig()
    rng = np.random.default_rng(rng_seed)
    h, w = canvas

    joints = None
    for _ in range(32):
        orientation = rng.uniform(*gen.orientation_deg)
        scale = rng.uniform(*gen.figure_scale)
        candidate = _figure_joints(rng, skeleton, orientation, scale)
        joints = _place(rng, candidate, canvas, gen.margin, pad=max(gen.head_radius))
        if joints is not None:
            break
    if joints is None:
        raise ValueError(f"canvas {canvas} too small for the skeleton's maximum extent")

    background = rng.uniform(*gen.background)
    strokes = _figure_strokes(rng, skeleton, joints, gen)

    extra_people: List[Keypoints] = []
    if rng.random() < gen.second_figure_prob:
        orientation2 = rng.uniform(*gen.orientation_deg)
        scale2 = rng.uniform(*gen.second_figure_scale)
        second = _figure_joints(rng, skeleton, orientation2, scale2)
        placed = _place(rng, second, canvas, gen.margin, pad=max(gen.head_radius))
        if placed is not None:
            strokes += _figure_strokes(rng, skeleton, placed, gen)
            extra_people.append(_labeled_keypoints(skeleton, placed, canvas))

    n_clutter = int(rng.integers(gen.clutter_count[0], gen.clutter_count[1] + 1))
    for _ in range(n_clutter):
        p0 = np.array([rng.uniform(gen.margin, w - gen.margin),
                       rng.uniform(gen.margin, h - gen.margin)])
        angle = rng.uniform(0.0, 2.0 * math.pi)
        length = rng.uniform(*gen.clutter_length)
        p1 = p0 + length * np.array([math.cos(angle), math.sin(angle)])
        p1 = np.clip(p1, gen.margin, [w - gen.margin, h - gen.margin])
        strokes.append(Stroke("segment", tuple(p0), tuple(p1),
                              rng.uniform(*gen.thickness),
                              rng.uniform(*gen.foreground)))

    image = _render(strokes, canvas, background)[None]
    keypoints = _labeled_keypoints(skeleton, joints, canvas)
    pts = keypoints.xy[keypoints.present]
    bbox_center = (pts.min(axis=0) + pts.max(axis=0)) / 2.0
    sample = PoseSample(
        image=image,
        keypoints=keypoints,
        center=(float(bbox_center[0]), float(bbox_center[1])),
        scale=keypoints.bbox_max_side(),
        occluded_parts=frozenset(
            name for name, ok in zip(skeleton.labeled, keypoints.present) if not ok
        ),
        parts=skeleton.labeled,
        extra_people=tuple(extra_people),
        background=float(background),
    )
    if with_geometry:
        return sample, strokes
    return sample


# -- augmentation ------------------------------------------------------------


def apply_affine(sample: PoseSample, rotation_deg: float, scale: float,
                 flip: bool) -> PoseSample:
    """Warp image and keypoints by the same map: optional horizontal flip,
    then rotation and scaling about the image center.

    Keypoints pushed outside the canvas are marked absent.  On flip, l_/r_
    part labels are swapped so labels keep their anatomical meaning.
    """
    _, h, w = sample.image.shape
    center = np.array([w / 2.0, h / 2.0])
    rot = _rot(rotation_deg)

    def fwd(points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2).copy()
        if flip:
            pts[:, 0] = w - pts[:, 0]
        return (pts - center) @ (scale * rot).T + center

    def src_index(out_idx: np.ndarray) -> np.ndarray:
        # inverse map in (row, col) index space, for ndimage.affine_transform
        cont = out_idx[::-1] + 0.5  # (u, v)
        p = rot.T @ (cont - center) / scale + center
        if flip:
            p[0] = w - p[0]
        return (p - 0.5)[::-1]

    base = src_index(np.zeros(2))
    matrix = np.stack([src_index(np.array([1.0, 0.0])) - base,
                       src_index(np.array([0.0, 1.0])) - base], axis=1)
    warped = ndimage.affine_transform(
        sample.image[0].astype(np.float64), matrix, offset=base, order=1,
        mode="constant", cval=sample.background,
    ).astype(np.float32)[None]

    def transform_keypoints(kps: Keypoints) -> Keypoints:
        xy = fwd(kps.xy)
        present = kps.present.copy()
        if flip:
            perm = _flip_permutation(sample.parts)
            xy = xy[perm]
            present = present[perm]
        inside = (xy[:, 0] >= 0) & (xy[:, 0] < w) & (xy[:, 1] >= 0) & (xy[:, 1] < h)
        return Keypoints(xy, present & inside)

    keypoints = transform_keypoints(sample.keypoints)
    extra = tuple(transform_keypoints(k) for k in sample.extra_people)
    new_center = fwd(np.array(sample.center))[0]
    new_center = np.clip(new_center, 0.0, [w - 1e-3, h - 1e-3])
    occluded = frozenset(
        name for name, ok in zip(sample.parts, keypoints.present) if not ok
    )
    return replace(
        sample,
        image=warped,
        keypoints=keypoints,
        extra_people=extra,
        center=(float(new_center[0]), float(new_center[1])),
        scale=sample.scale * scale,
        occluded_parts=occluded,
    )


def augment(sample: PoseSample, rng_seed: int, rotation_range: float = 40.0,
            scale_range: Tuple[float, float] = (0.7, 1.3),
            flip: bool = True) -> PoseSample:
    """Random rotation/scaling/flip with parameters drawn from ``rng_seed``."""
    rng = np.random.default_rng(rng_seed)
    theta = rng.uniform(-rotation_range, rotation_range)
    factor = rng.uniform(*scale_range)
    do_flip = bool(flip) and bool(rng.random() < 0.5)
    return apply_affine(sample, theta, factor, do_flip)


# -- training targets ----------------------------------------------------------


@dataclass
class TrainingPair:
    image: np.ndarray            # (C, H, W)
    center: np.ndarray           # (1, h, w)
    stage1_targets: BeliefStack  # all-people mode, for the stage-1 loss
    later_targets: BeliefStack   # primary-only mode, for stages >= 2


def make_training_pair(sample: PoseSample, spec, sigma: float) -> TrainingPair:
    """Two-mode ideal belief maps plus the center map for one sample.

    Stage 1 sees peaks for every figure (it predicts from local evidence);
    later stages are supervised on the primary figure only and receive the
    center map to select it.
    """
    if tuple(sample.image.shape[1:]) != tuple(spec.input_size):
        raise ValueError(
            f"sample canvas {sample.image.shape[1:]} != spec input {spec.input_size}"
        )
    hm = spec.heatmap_size
    stride = spec.heatmap_stride
    people = [sample.keypoints, *sample.extra_people]
    stage1 = ideal_beliefs(people, sigma, stride, hm, mode="all_people")
    later = ideal_beliefs(people, sigma, stride, hm, mode="primary_only")
    cm = center_map(sample.center, sigma, hm, stride=stride)
    return TrainingPair(image=sample.image, center=cm,
                        stage1_targets=stage1, later_targets=later)


# -- datasets and manifests ----------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    count: int
    seed: int
    canvas: Tuple[int, int] = (64, 64)
    gen: GenConfig = field(default_factory=GenConfig)

    def sample_seeds(self) -> List[int]:
        state = np.random.SeedSequence(self.seed).generate_state(self.count, dtype=np.uint64)
        return [int(v) for v in state]


MANIFEST_VERSION = 1


def data_config_to_dict(config: DataConfig) -> dict:
    gen = config.gen
    return {
        "count": config.count,
        "seed": config.seed,
        "canvas": list(config.canvas),
        "gen": {
            "background": list(gen.background),
            "foreground": list(gen.foreground),
            "thickness": list(gen.thickness),
            "head_radius": list(gen.head_radius),
            "orientation_deg": list(gen.orientation_deg),
            "figure_scale": list(gen.figure_scale),
            "clutter_count": list(gen.clutter_count),
            "clutter_length": list(gen.clutter_length),
            "second_figure_prob": gen.second_figure_prob,
            "second_figure_scale": list(gen.second_figure_scale),
            "margin": gen.margin,
        },
    }


def data_config_from_dict(data: dict) -> DataConfig:
    gen_d = data.get("gen", {})
    def pair(key, default):
        v = gen_d.get(key, default)
        return (v[0], v[1]) if isinstance(v, (list, tuple)) else v
    defaults = GenConfig()
    gen = GenConfig(
        background=pair("background", defaults.background),
        foreground=pair("foreground", defaults.foreground),
        thickness=pair("thickness", defaults.thickness),
        head_radius=pair("head_radius", defaults.head_radius),
        orientation_deg=pair("orientation_deg", defaults.orientation_deg),
        figure_scale=pair("figure_scale", defaults.figure_scale),
        clutter_count=tuple(int(x) for x in gen_d.get("clutter_count", defaults.clutter_count)),
        clutter_length=pair("clutter_length", defaults.clutter_length),
        second_figure_prob=float(gen_d.get("second_figure_prob", defaults.second_figure_prob)),
        second_figure_scale=pair("second_figure_scale", defaults.second_figure_scale),
        margin=float(gen_d.get("margin", defaults.margin)),
    )
    return DataConfig(count=int(data["count"]), seed=int(data["seed"]),
                      canvas=tuple(int(x) for x in data["canvas"]), gen=gen)


def write_manifest(path, config: DataConfig) -> dict:
    manifest = {
        "version": MANIFEST_VERSION,
        "config": data_config_to_dict(config),
        "sample_seeds": config.sample_seeds(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_manifest(path) -> Tuple[DataConfig, List[int]]:
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version")
    return data_config_from_dict(manifest["config"]), [int(s) for s in manifest["sample_seeds"]]


class SynthDataset:
    """Seed-addressed sample collection; regenerating a split is bitwise stable."""

    def __init__(self, config: DataConfig, seeds: Optional[List[int]] = None,
                 skeleton: Optional[Skeleton] = None):
        self.config = config
        self.seeds = seeds if seeds is not None else config.sample_seeds()
        self.skeleton = skeleton or default_skeleton()
        self._cache: Dict[int, PoseSample] = {}

    @classmethod
    def from_manifest(cls, path) -> "SynthDataset":
        config, seeds = read_manifest(path)
        return cls(config, seeds)

    def __len__(self) -> int:
        return len(self.seeds)

    def base(self, index: int) -> PoseSample:
        sample = self._cache.get(index)
        if sample is None:
            sample = sample_pose(self.seeds[index], self.skeleton,
                                 self.config.canvas, self.config.gen)
            self._cache[index] = sample
        return sample

    def save_pngs(self, directory) -> List[str]:
        from pathlib import Path

        from PIL import Image

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for i in range(len(self)):
            img = (np.clip(self.base(i).image[0], 0.0, 1.0) * 255.0).round().astype(np.uint8)
            path = directory / f"sample_{i:05d}.png"
            Image.fromarray(img, mode="L").save(path)
            paths.append(str(path))
        return paths
