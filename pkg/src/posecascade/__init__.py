"""posecascade: sequential belief-map pose estimation, built from scratch.

The package provides a small autograd tensor engine, declarative multi-stage
architectures with exact receptive-field analysis, Gaussian belief-map
targets, a synthetic articulated-figure benchmark, the four training schemes
for cascaded predictors, and PCK evaluation tooling.
"""

from .architecture import (
    BuildError,
    LayerSpec,
    Model,
    ModelSpec,
    StageSpec,
    build_cpm,
    fingerprint_spec,
    load_model,
    load_spec,
    save_model,
    save_spec,
    spec_parameter_count,
)
from .beliefs import (
    BeliefStack,
    Keypoints,
    center_map,
    extract_keypoints,
    ideal_beliefs,
    merge_scales,
)
from .engine import Parameter, Tape, Tensor, backward, sgd_step
from .evaluation import PckAccumulator, PckResult, pck, rf_sweep, stage_curve
from .receptive import (
    DesignError,
    RfReport,
    build_rf_family,
    design_default_specs,
    receptive_field,
)
from .synth import (
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
    sample_pose,
)
from .training import (
    GradientStats,
    TrainConfig,
    TrainingDiverged,
    gradient_report,
    scheme_phases,
    stage_loss,
    total_loss,
    train,
)

__version__ = "0.1.0"
