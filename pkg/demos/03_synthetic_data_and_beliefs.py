"""Synthetic stick figures, ideal belief maps, and keypoint extraction.

Run:  python demos/03_synthetic_data_and_beliefs.py
Writes a handful of PNGs under demos/out/ for visual inspection.
"""

from pathlib import Path

import numpy as np

from posecascade import (
    augment,
    design_default_specs,
    extract_keypoints,
    make_training_pair,
    sample_pose,
)
from posecascade.beliefs import stack_to_pngs
from posecascade.synth import GenConfig

out_dir = Path(__file__).parent / "out"
out_dir.mkdir(exist_ok=True)

sample = sample_pose(rng_seed=42)
print(f"parts: {sample.parts}")
print(f"keypoints:\n{np.round(sample.keypoints.xy, 2)}")
print(f"center {tuple(round(c, 1) for c in sample.center)}, "
      f"scale {sample.scale:.1f}px, background {sample.background:.3f}")

# The same seed always reproduces the same sample, bit for bit.
again = sample_pose(rng_seed=42)
print(f"regeneration bitwise identical: {np.array_equal(sample.image, again.image)}")

from PIL import Image

Image.fromarray((np.clip(sample.image[0], 0, 1) * 255).astype(np.uint8),
                mode="L").save(out_dir / "figure.png")

# Augmentation warps image and keypoints with one affine map; a flip swaps
# left/right labels so they keep their meaning.
flipped = augment(sample, rng_seed=7, rotation_range=30.0, scale_range=(0.9, 1.1))
Image.fromarray((np.clip(flipped.image[0], 0, 1) * 255).astype(np.uint8),
                mode="L").save(out_dir / "figure_augmented.png")

# Training targets: Gaussian peaks per part plus a complementary background
# channel, in two modes (all figures vs the primary figure only).
spec = design_default_specs(parts=5, input_size=(64, 64), target_stage1_rf=24,
                            target_context_rf=13, stages=3, heatmap_stride=4)
pair = make_training_pair(sample, spec, sigma=5.0)
print(f"\nbelief stack: {pair.stage1_targets.num_channels} channels "
      f"({pair.stage1_targets.height}x{pair.stage1_targets.width} cells)")
print(f"peak value: {pair.stage1_targets.part_channels().max():.3f}")
paths = stack_to_pngs(pair.stage1_targets, out_dir, prefix="target")
print(f"wrote {len(paths)} target channel PNGs")

# Extraction inverts the targets: argmax cells map back to image pixels.
recovered = extract_keypoints(pair.later_targets, stride=4)
err = np.linalg.norm(recovered.xy - sample.keypoints.xy, axis=1)
print(f"extract(ideal) errors per part (px): {np.round(err, 2)} "
      f"(bounded by the heatmap quantization, stride/√2 per axis)")
