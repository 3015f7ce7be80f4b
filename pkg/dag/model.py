import logging
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from .affordance_block import AffordanceFusion, AffordanceTokens, VisualTokens, pool_tokens
from .backbone import (
    AttentionHeatmap,
    FeatureBackbone,
    NoiseSchedule,
    PlainConvBackbone,
    PyramidAggregator,
    StubDiffusionBackbone,
    export_word_attention,
    extract_pyramid,
    load_adapter,
    sample_noisy_image,
)
from .captioner import (
    DEFAULT_AFFORDANCE_VOCAB,
    FrozenImageEncoder,
    FrozenTextEncoder,
    SelfPromptCaptioner,
    TokenBatch,
    load_vocabulary,
)
from .decoder import AffordanceDecoder, AffordanceMask
from .errors import StructureError
from .nn_utils import count_trainable, freeze, parameter_checksum, seeded
from .point_backbone import PointEncoder, PointPropagation
from .run_config import RunConfig

logger = logging.getLogger(__name__)


class DAGModel(nn.Module):
    """
    The full grounding pipeline, assembled from a RunConfig.

    Frozen parts (backbone, text and image encoders) are drawn from
    ``backbone_seed``; trainable parts from ``seed``. The ablation toggles
    decide which components are registered at all, so disabled parts add no
    parameters.
    """

    def __init__(self, config: RunConfig):
        super().__init__()
        self.config = config
        self.schedule = NoiseSchedule.scaled_linear()

        vocabulary = load_vocabulary(config.vocabulary) if config.vocabulary else DEFAULT_AFFORDANCE_VOCAB
        self.text_encoder = FrozenTextEncoder(config.d_txt, vocabulary, seed=config.backbone_seed)
        self.backbone = self._build_backbone(config)
        self.image_encoder: Optional[FrozenImageEncoder] = None
        if self.uses_captioner:
            self.image_encoder = FrozenImageEncoder(config.d_img, config.patch_size, seed=config.backbone_seed + 1)

        with seeded(config.seed):
            self.captioner = (
                SelfPromptCaptioner(self.image_encoder, config.prompt_count, config.caption_tokens, config.d_txt)
                if self.uses_captioner else None
            )
            self.aggregator = PyramidAggregator(self.backbone.channels, config.d)
            self.fusion = (
                AffordanceFusion(config.d, config.d_txt, config.blocks, config.heads, config.ffn_ratio,
                                 config.pooling_m, config.positional_encoding)
                if config.affordance_block else None
            )
            self.point_encoder = PointEncoder(config.level_sizes, config.radii, [config.nsample] * len(config.radii),
                                              config.point_channels, config.d_p)
            self.propagation = PointPropagation(config.point_channels, config.d)
            self.decoder = AffordanceDecoder(config.d, config.d_p, config.heads, config.ffn_ratio, config.cls_token)
        if config.freeze_point_encoder:
            self.point_encoder.freeze()
        logger.info(f"Built DAG model with {self.trainable_parameter_count()} trainable parameters "
                    f"(captioner={config.captioner}, block={config.affordance_block}, cls={config.cls_token}, "
                    f"extractor={config.extractor})")

    @staticmethod
    def _build_backbone(config: RunConfig) -> FeatureBackbone:
        if config.extractor == "adapter":
            return load_adapter(config.adapter_factory)
        if config.extractor == "plain_cnn":
            return PlainConvBackbone(config.pyramid_channels, config.d_txt, seed=config.backbone_seed)
        return StubDiffusionBackbone(config.pyramid_channels, config.d_txt, seed=config.backbone_seed)

    @property
    def uses_captioner(self) -> bool:
        return self.config.captioner == "implicit" or self.config.block_condition == "caption"

    def frozen_modules(self) -> Dict[str, nn.Module]:
        modules = {"backbone": self.backbone, "text_encoder": self.text_encoder}
        if self.image_encoder is not None:
            modules["image_encoder"] = self.image_encoder
        if self.config.freeze_point_encoder:
            modules["point_encoder"] = self.point_encoder
        return modules

    def frozen_checksums(self) -> Dict[str, str]:
        return {name: parameter_checksum(module) for name, module in self.frozen_modules().items()}

    def trainable_parameter_count(self) -> int:
        return count_trainable(self)

    def train(self, mode: bool = True):
        super().train(mode)
        for module in self.frozen_modules().values():
            module.eval()
        return self

    # -- conditioning -----------------------------------------------------

    def backbone_condition(self, images: torch.Tensor, texts: Sequence[str]) -> TokenBatch:
        if self.config.captioner == "implicit":
            return self.captioner(images)
        if self.config.captioner == "verb":
            return self.text_encoder.encode_batch(texts)
        return self.text_encoder.null_batch(images.shape[0])

    def block_condition(self, images: torch.Tensor, texts: Sequence[str],
                        backbone_condition: TokenBatch) -> TokenBatch:
        if self.config.block_condition == "caption":
            return backbone_condition if self.config.captioner == "implicit" else self.captioner(images)
        return self.text_encoder.encode_batch(texts)

    def noisy(self, images: torch.Tensor) -> torch.Tensor:
        t = self.config.diffusion_step_t
        noise = torch.zeros_like(images) if t == 0 else torch.randn_like(images)
        return sample_noisy_image(images, t, self.schedule, noise)

    # -- forward ----------------------------------------------------------

    def affordance_tokens(self, images: torch.Tensor, texts: Sequence[str]) -> Tuple[AffordanceTokens, List[Dict]]:
        condition = self.backbone_condition(images, texts)
        pyramid = extract_pyramid(self.noisy(images), condition, self.backbone)
        visual_map = self.aggregator(pyramid)
        if self.fusion is None:
            return pool_tokens(VisualTokens.from_map(visual_map), self.config.pooling_m), []
        return self.fusion(visual_map, self.block_condition(images, texts, condition))

    def forward(self, points: torch.Tensor, images: torch.Tensor,
                texts: Sequence[str]) -> Tuple[AffordanceMask, Dict[str, object]]:
        """
        Args:
            points: normalized clouds ``(B, N, 3)``
            images: ``(B, 3, H, W)`` in [0, 1]
            texts: one affordance phrase per sample

        Returns:
            AffordanceMask ``(B, N)`` and the attention weights of every fusion stage
        """
        if points.shape[0] != images.shape[0] or len(texts) != images.shape[0]:
            raise StructureError(
                f"batch mismatch: {points.shape[0]} clouds, {images.shape[0]} images, {len(texts)} texts"
            )
        aff, block_attention = self.affordance_tokens(images, texts)
        cls, levels = self.point_encoder(points)
        point_feats = self.propagation(levels)
        mask, decoder_attention = self.decoder(cls, aff, point_feats)
        return mask, {"block": block_attention, "decoder": decoder_attention}

    @torch.no_grad()
    def predict(self, points: torch.Tensor, image: torch.Tensor, text: str) -> torch.Tensor:
        """Mask values ``(N,)`` for one normalized sample."""
        was_training = self.training
        self.eval()
        try:
            mask, _ = self(points.unsqueeze(0), image.unsqueeze(0), [text])
        finally:
            self.train(was_training)
        return mask.values[0]

    def export_attention(self, image: torch.Tensor, text: str, word_index: int, level: int) -> AttentionHeatmap:
        return export_word_attention(image, text, self.backbone, word_index, level, self.text_encoder)
