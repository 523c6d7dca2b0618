"""Depth-quality-aware RGB-D salient object detection."""

from .core import (
    DataError,
    InvariantError,
    RgbdSample,
    SaliencyError,
    ShapeMismatchError,
    StageOrderError,
    hadamard,
    pos,
    resize_map,
)
from .data import (
    SynthSpec,
    load_checkpoint,
    load_dataset,
    load_map,
    save_checkpoint,
    save_map,
    synthesize_dataset,
)
from .fusion import feature_fusion, simple_fusion
from .metrics import (
    MetricReport,
    e_measure,
    evaluate_dataset,
    f_measure,
    mae,
    mean_f,
    omega1,
    omega2,
    precision_recall,
    s_measure,
)
from .networks import BackboneConfig, ModelBundle, dca_loss, register_backbone, saliency_loss
from .pseudo_gt import PseudoGt, build_dca_training_set, compute_b, compute_p, compute_pgt
from .training import (
    SplitPlan,
    TrainConfig,
    evaluate_bundle,
    run_full_pipeline,
    split_training_set,
    stage1_train_subnets,
    stage2_train_dca,
    stage3_finetune_rgb_with_cross,
    stage4_joint_finetune,
)

__version__ = "0.1.0"
