"""Designing stage networks around receptive-field targets.

Run:  python demos/02_architecture_receptive_fields.py
"""

import numpy as np

from posecascade import (
    build_cpm,
    build_rf_family,
    design_default_specs,
    receptive_field,
    spec_parameter_count,
)
from posecascade.engine import Tensor

# The toy geometry: 64x64 inputs, stride-4 heatmaps, three stages.  The first
# stage needs a moderate reach on the image; later stages need a wide reach
# on the previous stage's belief maps to see other parts' peaks.
spec = design_default_specs(parts=5, input_size=(64, 64), target_stage1_rf=24,
                            target_context_rf=13, stages=3, heatmap_stride=4)
report = receptive_field(spec)
for st in report.stages:
    line = f"stage {st.stage}: reach on image = {st.rf_on_image}px"
    if st.rf_on_beliefs:
        line += f", reach on previous beliefs = {st.rf_on_beliefs} cells"
    print(line)

# The same builder reproduces the full-scale geometry: 368x368 inputs,
# stride-8 heatmaps, a 31-cell context reach (= 248+ image pixels).
big = design_default_specs(parts=14, input_size=(368, 368), target_stage1_rf=160,
                           target_context_rf=31, stages=3, heatmap_stride=8)
big_report = receptive_field(big)
print(f"\nfull-scale geometry: stage-1 reach {big_report.stages[0].rf_on_image}px, "
      f"stage-2 context {big_report.stages[1].rf_on_beliefs} cells "
      f"({big_report.stages[1].rf_on_beliefs * 8}px on the image), "
      f"composed stage-3 reach {big_report.composed_rf_image}px")

# Weight sharing: stages >= 2 reuse one image-feature trunk.
shared = build_cpm(spec, seed=0)
unshared = build_cpm(design_default_specs(5, (64, 64), 24, 13, stages=3,
                                          heatmap_stride=4,
                                          share_image_features=False), seed=0)
print(f"\nparameters with shared trunk: {shared.num_parameters()}")
print(f"parameters without sharing:   {unshared.num_parameters()}")

# Forward pass: every stage emits (parts+1) belief channels on the heatmap grid.
img = Tensor(np.random.default_rng(1).normal(size=(1, 1, 64, 64)).astype(np.float32))
cm = Tensor(np.zeros((1, 1, 16, 16), dtype=np.float32))
outs = shared.forward(img, cm)
print(f"\nstage outputs: {[tuple(o.shape) for o in outs]}")

# A receptive-field family for the sweep experiment: same parameter budget,
# increasing context reach.
family = build_rf_family(5, (64, 64), [3, 7, 13], stages=3, heatmap_stride=4,
                         target_stage1_rf=24)
print("\nreceptive-field family (balanced parameters):")
for member in family:
    r = receptive_field(member)
    print(f"  context reach {r.stages[-1].rf_on_beliefs:>2} cells -> "
          f"{spec_parameter_count(member)} parameters")
