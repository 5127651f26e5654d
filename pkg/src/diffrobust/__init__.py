"""diffrobust: adversarial robustness of classifiers on frozen diffusion features."""

from .attacks import (
    AttackConfig,
    AttackOutcome,
    ThreatModel,
    apgd,
    autoattack,
    bim,
    cw_attack,
    cw_margin_loss,
    dlr_loss,
    fab,
    fgsm,
    pgd,
    project,
    robust_accuracy,
    square_attack,
)
from .backbone import (
    BackboneCheckpoint,
    BlockDescriptor,
    FeatureVector,
    ProbeSpec,
    extract_features,
    list_blocks,
    load_checkpoint,
    pool_flatten,
    pool_tokens,
    pretrain_backbone,
    save_checkpoint,
)
from .data import LabeledImageSet, load_cifar10, make_synthetic_twoclass
from .harness import (
    RunRecord,
    SweepGrid,
    config_hash,
    emit_report,
    evaluate_cell,
    reference_comparison,
    run_sweep,
)
from .heads import (
    AttentionHead,
    DiffusionClassifier,
    LinearHead,
    TrainConfig,
    head_forward,
    load_head,
    predict,
    save_head,
    train_head,
)
from .schedule import (
    NoiseSchedule,
    NoisedImage,
    ScheduleError,
    alpha_bar,
    build_linear_schedule,
    default_schedule,
    forward_step,
    q_sample,
)
from .unet import UNet, UNetConfig

__version__ = "0.1.0"
