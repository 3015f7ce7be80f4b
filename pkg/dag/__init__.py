from .backbone import (
    FeaturePyramid,
    NoiseSchedule,
    PyramidAggregator,
    StubDiffusionBackbone,
    aggregate_pyramid,
    export_word_attention,
    extract_pyramid,
    sample_noisy_image,
)
from .affordance_block import AffordanceBlock, AffordanceFusion, affordance_block, pool_tokens, scale_modulate
from .captioner import (
    FrozenImageEncoder,
    FrozenTextEncoder,
    SelfPromptCaptioner,
    encode_affordance_text,
    encode_image_with_prompts,
    project_caption,
)
from .data import AffordanceSample, DatasetManifest, SyntheticConfig, generate_synthetic, load_sample, normalize_points
from .decoder import AffordanceDecoder, cross_attention, fuse_global, fuse_points, predict_mask
from .errors import DagError
from .model import DAGModel
from .objectives import (
    MetricsReport,
    bce_loss,
    dice_loss,
    metric_auc,
    metric_mae,
    metric_miou,
    metric_sim,
    total_loss,
)
from .point_backbone import PointEncoder, PointPropagation, encode_points, interpolate_features, propagate
from .run_config import RunConfig, load_run_config
from .trainer import ablate, evaluate, infer, load_checkpoint, make_synthetic, train

__all__ = [
    'FeaturePyramid',
    'NoiseSchedule',
    'PyramidAggregator',
    'StubDiffusionBackbone',
    'aggregate_pyramid',
    'export_word_attention',
    'extract_pyramid',
    'sample_noisy_image',
    'AffordanceBlock',
    'AffordanceFusion',
    'affordance_block',
    'pool_tokens',
    'scale_modulate',
    'FrozenImageEncoder',
    'FrozenTextEncoder',
    'SelfPromptCaptioner',
    'encode_affordance_text',
    'encode_image_with_prompts',
    'project_caption',
    'AffordanceSample',
    'DatasetManifest',
    'SyntheticConfig',
    'generate_synthetic',
    'load_sample',
    'normalize_points',
    'AffordanceDecoder',
    'cross_attention',
    'fuse_global',
    'fuse_points',
    'predict_mask',
    'DagError',
    'DAGModel',
    'MetricsReport',
    'bce_loss',
    'dice_loss',
    'metric_auc',
    'metric_mae',
    'metric_miou',
    'metric_sim',
    'total_loss',
    'PointEncoder',
    'PointPropagation',
    'encode_points',
    'interpolate_features',
    'propagate',
    'RunConfig',
    'load_run_config',
    'ablate',
    'evaluate',
    'infer',
    'load_checkpoint',
    'make_synthetic',
    'train',
]
