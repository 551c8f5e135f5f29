"""Semantic- and uncertainty-aware ESRGAN-style x4 super-resolution.

Library surface: configuration-driven networks, losses, Monte-Carlo dropout
inference, bicubic data pipeline, metric suite, adversarial trainer, and the
``suesr`` command line tool.
"""

from .config import RunConfig, config_hash, default_config
from .datapipe import (
    Manifest,
    ManifestEntry,
    bicubic_downsample,
    bicubic_resize,
    build_manifest,
    load_image,
    prepare_dataset,
    save_image,
    stratified_counts,
    synthesize_toy_dataset,
)
from .errors import (
    BackendError,
    CheckpointError,
    ConfigError,
    DataError,
    IncompatibilityError,
    InputError,
    NumericError,
    ShapeError,
    SizeError,
    SuesrError,
)
from .metrics import (
    GaussianFit,
    MetricReport,
    evaluate_split,
    fid,
    gaussian_fit,
    lpips_distance,
    psnr,
    ssim,
)
from .networks import (
    DiscriminatorConfig,
    DropoutMode,
    Generator,
    GeneratorConfig,
    ParameterSet,
    build_discriminator,
    build_generator,
    discriminator_forward,
    generator_forward,
    pixel_shuffle,
    pixel_unshuffle,
)
from .objectives import (
    FeatureExtractor,
    LossBreakdown,
    LossWeights,
    composite_generator_loss,
    create_feature_extractor,
    perceptual_loss,
    pixel_loss,
    ragan_discriminator_loss,
    ragan_generator_loss,
)
from .panels import emit_panel, render_panel
from .semantics import (
    SegmentationMap,
    Segmenter,
    create_segmenter,
    segment,
    semantic_consistency_metric,
    semantic_surrogate_loss,
)
from .trainer import (
    Checkpoint,
    EarlyStopState,
    TrainConfig,
    TrainingBackends,
    TrainingResult,
    early_stop_update,
    finetune,
    load_checkpoint,
    load_split_arrays,
    save_checkpoint,
    train,
)
from .uncertainty import (
    UncertaintyOutput,
    aggregate_passes,
    heatmap_colormap,
    mc_inference,
    render_heatmap,
)

__version__ = "0.1.0"
