"""Self-supervised video representation learning on synthetic moving shapes.

Clip pairs are generated with exactly prescribed spatial/temporal overlap
rates; a small 3D CNN is pretrained with overlap/playback/rotation
classification heads jointly with one of four contrastive frameworks, and
evaluated by linear probing, fine-tuning and nearest-neighbor retrieval.
"""

from .augment import (
    AugmentConfig,
    AugmentedPair,
    ClipWindow,
    CropBox,
    OverlapCandidates,
    PhotometricParams,
    PretextLabels,
    apply_photometric,
    apply_rotation,
    generate_pair,
    interval_overlap_rate,
    place_second_crop,
    rect_overlap_rate,
    resample_playback,
    solve_spatial_offset,
    solve_temporal_offset,
)
from .config import ExperimentConfig, load_config, override_config, save_config, validate_config
from .contrastive import (
    FRAMEWORK_KINDS,
    ContrastiveFramework,
    FrameworkConfig,
    MoCoQueue,
    cosine_sim,
    infonce_loss,
    make_framework,
    momentum_update,
    negative_cosine_loss,
    queue_push,
)
from .errors import (
    ConfigError,
    ContractError,
    DivergenceError,
    PlacementError,
    SampleGenerationError,
)
from .evaluate import (
    EvalConfig,
    RetrievalResult,
    VideoFeature,
    fine_tune,
    linear_probe,
    retrieval_recall,
    video_feature,
    video_features,
)
from .model import EncoderConfig, VideoSSLModel, build_model, load_checkpoint, save_checkpoint
from .synthdata import (
    DatasetSpec,
    MotionParams,
    VideoSample,
    export_dataset,
    load_dataset,
    make_dataset,
    render_video,
    split_dataset,
)
from .training import (
    METRICS_KEYS,
    LossWeights,
    TrainConfig,
    build_batch,
    build_pretrain_model,
    joint_loss,
    lr_at,
    pretext_ce,
    pretext_eval_accuracy,
    pretrain,
    stor_loss,
    train_step,
)

__version__ = "0.1.0"
