"""Ideal belief maps, belief-stack utilities, multi-scale merging, extraction.

Coordinate convention (used consistently across the package): image pixel k
spans the interval [k, k+1), so continuous keypoint coordinates (u, v) live in
[0, W) x [0, H).  Heatmap cell (row v, col u) at stride s corresponds to the
image point (u*s + s/2, v*s + s/2); belief values are Gaussian in the image-
pixel distance to that point, and extracted keypoints are reported at exactly
those cell centers.  "Grid-aligned" means lying on that lattice.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import json

import numpy as np
from scipy import ndimage


@dataclass
class Keypoints:
    """Per-part image locations; a part may be marked absent."""

    xy: np.ndarray       # (P, 2) float, columns (u, v)
    present: np.ndarray  # (P,) bool

    def __init__(self, xy, present=None):
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        if present is None:
            present = np.ones(len(xy), dtype=bool)
        self.xy = xy
        self.present = np.asarray(present, dtype=bool).reshape(-1)
        if self.present.shape[0] != self.xy.shape[0]:
            raise ValueError("present mask length does not match keypoint count")

    @classmethod
    def from_coords(cls, coords: Sequence[Optional[Tuple[float, float]]]) -> "Keypoints":
        xy = np.zeros((len(coords), 2))
        present = np.zeros(len(coords), dtype=bool)
        for i, c in enumerate(coords):
            if c is not None:
                xy[i] = c
                present[i] = True
        return cls(xy, present)

    def __len__(self) -> int:
        return self.xy.shape[0]

    def copy(self) -> "Keypoints":
        return Keypoints(self.xy.copy(), self.present.copy())

    def bbox_max_side(self) -> float:
        """Max side of the bounding box over present parts (PCK normalizer)."""
        pts = self.xy[self.present]
        if len(pts) == 0:
            return 0.0
        span = pts.max(axis=0) - pts.min(axis=0)
        return float(span.max())


@dataclass
class BeliefStack:
    """Dense per-part score maps for one stage: (P+1, h, w), background last."""

    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float32)
        if self.scores.ndim != 3:
            raise ValueError(f"belief stack must be (channels, h, w), got {self.scores.shape}")

    @property
    def num_channels(self) -> int:
        return self.scores.shape[0]

    @property
    def height(self) -> int:
        return self.scores.shape[1]

    @property
    def width(self) -> int:
        return self.scores.shape[2]

    def part_channels(self) -> np.ndarray:
        return self.scores[:-1]

    def background(self) -> np.ndarray:
        return self.scores[-1]


def _cell_centers(size: Tuple[int, int], stride: float):
    h, w = size
    vs = (np.arange(h) + 0.5) * stride
    us = (np.arange(w) + 0.5) * stride
    return us, vs


def _gaussian_map(size: Tuple[int, int], stride: float, point, sigma: float) -> np.ndarray:
    us, vs = _cell_centers(size, stride)
    du2 = (us - point[0]) ** 2
    dv2 = (vs - point[1]) ** 2
    return np.exp(-(dv2[:, None] + du2[None, :]) / (2.0 * sigma * sigma))


def ideal_beliefs(kps: Union[Keypoints, Sequence[Keypoints]], sigma: float,
                  stride: int, map_size: Tuple[int, int],
                  mode: str = "all_people") -> BeliefStack:
    """Training-target stack with Gaussian peaks at ground-truth locations.

    With several people, each part channel is the elementwise max of the
    per-person Gaussians (peaks stay <= 1); ``primary_only`` keeps only the
    first person.  The background channel is max(0, 1 - max over parts);
    parts absent for every selected person give an all-zero channel.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if mode not in ("all_people", "primary_only"):
        raise ValueError(f"unknown mode {mode!r}")
    people = [kps] if isinstance(kps, Keypoints) else list(kps)
    if not people:
        raise ValueError("need at least one Keypoints instance")
    if mode == "primary_only":
        people = people[:1]
    parts = len(people[0])
    h, w = map_size
    scores = np.zeros((parts + 1, h, w), dtype=np.float32)
    for p in range(parts):
        channel = None
        for person in people:
            if not person.present[p]:
                continue
            g = _gaussian_map(map_size, stride, person.xy[p], sigma)
            channel = g if channel is None else np.maximum(channel, g)
        if channel is not None:
            scores[p] = channel
    scores[parts] = np.clip(1.0 - scores[:parts].max(axis=0), 0.0, 1.0)
    return BeliefStack(scores=scores)


def center_map(center: Tuple[float, float], sigma: float,
               size: Tuple[int, int], stride: int = 1) -> np.ndarray:
    """Single-channel (1, h, w) Gaussian marking the primary subject's center."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return _gaussian_map(size, stride, center, sigma)[None].astype(np.float32)


def merge_scales(stacks: Sequence[BeliefStack],
                 scales: Optional[Sequence[float]] = None) -> BeliefStack:
    """Resample stacks from perturbed scales onto one grid and average them.

    The reference grid belongs to the stack whose scale is closest to 1.0
    (ties: the larger grid), which makes the merge independent of argument
    order.  Resampling is bilinear.
    """
    stacks = list(stacks)
    if not stacks:
        raise ValueError("merge_scales needs at least one stack")
    if scales is None:
        scales = [1.0] * len(stacks)
    scales = [float(s) for s in scales]
    if len(scales) != len(stacks):
        raise ValueError("one scale per stack required")
    if any(s <= 0 for s in scales):
        raise ValueError("scales must be positive")
    if len(stacks) == 1:
        return BeliefStack(scores=stacks[0].scores.copy())

    ref = min(range(len(stacks)),
              key=lambda i: (abs(scales[i] - 1.0), -stacks[i].height * stacks[i].width, i))
    ref_h, ref_w = stacks[ref].height, stacks[ref].width
    ref_scale = scales[ref]

    acc = np.zeros((stacks[0].num_channels, ref_h, ref_w), dtype=np.float64)
    rows = np.arange(ref_h, dtype=np.float64)
    cols = np.arange(ref_w, dtype=np.float64)
    for stack, scale in zip(stacks, scales):
        if stack.num_channels != stacks[0].num_channels:
            raise ValueError("all stacks must have the same channel count")
        if (stack.height, stack.width) == (ref_h, ref_w) and scale == ref_scale:
            acc += stack.scores
            continue
        # Reference cell center -> shared image point -> source cell coordinates.
        factor = scale / ref_scale
        src_rows = (rows + 0.5) * factor - 0.5
        src_cols = (cols + 0.5) * factor - 0.5
        grid_r = np.repeat(src_rows, ref_w)
        grid_c = np.tile(src_cols, ref_h)
        for c in range(stack.num_channels):
            resampled = ndimage.map_coordinates(
                stack.scores[c].astype(np.float64), [grid_r, grid_c],
                order=1, mode="nearest")
            acc[c] += resampled.reshape(ref_h, ref_w)
    return BeliefStack(scores=(acc / len(stacks)).astype(np.float32))


def extract_keypoints(stack: BeliefStack, stride: int) -> Keypoints:
    """Argmax cell per part channel, mapped to image pixels at cell centers.

    Ties break to the smallest row-major index.  The background channel is
    ignored; every part gets a prediction.
    """
    parts = stack.num_channels - 1
    xy = np.zeros((parts, 2))
    for p in range(parts):
        flat = int(np.argmax(stack.scores[p]))
        v, u = divmod(flat, stack.width)
        xy[p] = (u * stride + stride / 2.0, v * stride + stride / 2.0)
    return Keypoints(xy)


# -- export ------------------------------------------------------------------

_BLOB_MAGIC = "POSECASCADE-BELIEFS"


def save_stack_blob(stack: BeliefStack, path) -> None:
    """Raw float32 blob with a JSON text header (for plotting pipelines)."""
    header = {
        "format_version": 1,
        "channels": stack.num_channels,
        "height": stack.height,
        "width": stack.width,
        "dtype": "float32",
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(f"{_BLOB_MAGIC} 1 {len(header_bytes)}\n".encode("ascii"))
        fh.write(header_bytes)
        fh.write(np.ascontiguousarray(stack.scores, dtype="<f4").tobytes())


def load_stack_blob(path) -> BeliefStack:
    with open(path, "rb") as fh:
        first = fh.readline().decode("ascii").split()
        if len(first) != 3 or first[0] != _BLOB_MAGIC:
            raise ValueError(f"{path}: not a belief-stack blob")
        header = json.loads(fh.read(int(first[2])).decode("utf-8"))
        shape = (header["channels"], header["height"], header["width"])
        data = np.frombuffer(fh.read(), dtype="<f4", count=int(np.prod(shape)))
    return BeliefStack(scores=data.reshape(shape).copy())


def stack_to_pngs(stack: BeliefStack, directory, prefix: str = "channel") -> List[str]:
    """Write one grayscale PNG per channel; values clipped to [0, 1]."""
    from pathlib import Path

    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in range(stack.num_channels):
        img = np.clip(stack.scores[c], 0.0, 1.0)
        img = (img * 255.0).round().astype(np.uint8)
        path = directory / f"{prefix}_{c:02d}.png"
        Image.fromarray(img, mode="L").save(path)
        paths.append(str(path))
    return paths
