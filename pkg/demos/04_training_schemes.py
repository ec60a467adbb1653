"""Intermediate supervision vs final-stage-only training, in miniature.

Trains a small 2-stage model twice on the same data and seed: once with a
loss on every stage (scheme i) and once supervising only the last stage
(scheme iv).  Early-epoch gradients in the stage-1 layers are visibly larger
with intermediate supervision, which is the mechanism that keeps deep
cascades trainable.

Run:  python demos/04_training_schemes.py   (about a minute on a laptop CPU)
"""

from posecascade import build_cpm, design_default_specs
from posecascade.synth import DataConfig, GenConfig, SynthDataset
from posecascade.training import TrainConfig, train

gen = GenConfig(figure_scale=(0.45, 0.6), margin=2.0, second_figure_prob=0.0)
train_ds = SynthDataset(DataConfig(count=200, seed=11, canvas=(32, 32), gen=gen))
val_ds = SynthDataset(DataConfig(count=60, seed=12, canvas=(32, 32), gen=gen))

spec = design_default_specs(parts=5, input_size=(32, 32), target_stage1_rf=14,
                            target_context_rf=5, stages=2, heatmap_stride=4,
                            base_width=6, context_width=10)

for scheme, label in (("i", "intermediate supervision"),
                      ("iv", "final-stage loss only")):
    model = build_cpm(spec, seed=3)
    config = TrainConfig(learning_rate=5e-6, batch_size=8, epochs=4, seed=3,
                         sigma=2.5, scheme=scheme, momentum=0.9,
                         rotation_range=15.0, scale_range=(0.9, 1.1))
    result = train(model, train_ds, config, val_data=val_ds)
    grad1 = result.grad_stats.mean_abs(1, "stage1/")
    final = [r["pck_at_0.2"] for r in result.metrics if r["stage"] == spec.stages]
    print(f"scheme {scheme:>2} ({label})")
    print(f"   epoch-1 mean |grad| in stage-1 layers: {grad1:.3e}")
    print(f"   held-out PCK@0.2 per epoch:            "
          f"{[round(v, 3) for v in final]}")
