"""Frozen conditional feature extraction: noising, pyramid extraction, layer mixing and attention export."""
import abc
import importlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from pydantic import BaseModel, Field, model_validator

from .attention import MultiHeadAttention
from .captioner import FrozenTextEncoder, TokenBatch
from .errors import AttentionIndexError, ConfigError, ShapeError, StepError, StructureError, UsageError
from .nn_utils import freeze, is_frozen, seeded

logger = logging.getLogger(__name__)


class NoiseSchedule(BaseModel):
    alpha_bar: Tuple[float, ...] = Field(description="Cumulative signal fraction per step, index 0 is the clean image")
    allow_terminal_zero: bool = Field(False, description="Permit a zero-SNR final step")

    @model_validator(mode="after")
    def _check_values(self):
        values = self.alpha_bar
        if len(values) < 2:
            raise ValueError("a schedule needs at least one noising step")
        if values[0] != 1.0:
            raise ValueError("alpha_bar at t = 0 must be exactly 1")
        if any(later >= earlier for earlier, later in zip(values, values[1:])):
            raise ValueError("alpha_bar must be strictly decreasing")
        lowest = values[-1]
        if lowest < 0 or (lowest == 0 and not self.allow_terminal_zero):
            raise ValueError("alpha_bar values must lie in (0, 1]")
        return self

    @property
    def t_max(self) -> int:
        return len(self.alpha_bar) - 1

    @classmethod
    def scaled_linear(cls, t_max: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012) -> "NoiseSchedule":
        """The latent-diffusion default: betas linear in sqrt space, ``alpha_bar_t = prod(1 - beta_k)``."""
        betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), t_max) ** 2
        return cls(alpha_bar=(1.0,) + tuple(float(v) for v in np.cumprod(1.0 - betas)))


def sample_noisy_image(image: torch.Tensor, t: int, schedule: NoiseSchedule, noise: torch.Tensor) -> torch.Tensor:
    """``sqrt(alpha_bar_t) * image + sqrt(1 - alpha_bar_t) * noise``; the identity at ``alpha_bar_t = 1``."""
    if not 0 <= t <= schedule.t_max:
        raise StepError(f"step {t} outside [0, {schedule.t_max}]")
    if noise.shape != image.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != image shape {tuple(image.shape)}")
    alpha_bar = schedule.alpha_bar[t]
    if alpha_bar == 1.0:
        return image.clone()
    return math.sqrt(alpha_bar) * image + math.sqrt(1.0 - alpha_bar) * noise


@dataclass
class FeaturePyramid:
    """Multi-scale maps ``(B, C_l, H_l, W_l)``, finest first, with optional cross-attention weights.

    ``attention[l]`` is ``(B, heads, H_l * W_l, K)`` or ``None`` when the level has none.
    """

    levels: List[torch.Tensor]
    attention: List[Optional[torch.Tensor]]

    def __post_init__(self):
        if len(self.levels) < 2:
            raise StructureError(f"a pyramid needs at least 2 levels, got {len(self.levels)}")
        sizes = [level.shape[-2:] for level in self.levels]
        for finer, coarser in zip(sizes, sizes[1:]):
            if coarser[0] > finer[0] or coarser[1] > finer[1]:
                raise StructureError(f"level sizes must be non-increasing, got {[tuple(s) for s in sizes]}")

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def level_meta(self) -> List[Tuple[int, int, int]]:
        return [tuple(level.shape[-3:]) for level in self.levels]


class FeatureBackbone(nn.Module, abc.ABC):
    """A frozen network mapping ``(noisy image, condition tokens)`` to a FeaturePyramid."""

    channels: Tuple[int, ...]

    @property
    def frozen(self) -> bool:
        return is_frozen(self)

    @property
    def depth(self) -> int:
        return len(self.channels)

    @property
    def required_divisor(self) -> int:
        return 1

    @abc.abstractmethod
    def forward(self, noisy_image: torch.Tensor, condition: TokenBatch) -> FeaturePyramid:
        ...


class StubDiffusionBackbone(FeatureBackbone):
    """
    Stride-2 convolutional stages, each followed by cross-attention to the condition tokens.

    Weights are drawn from ``seed`` and frozen at construction. Level ``l``
    has stride ``2 ** (l + 2)`` relative to the input.
    """

    def __init__(self, channels: Sequence[int] = (8, 16, 32), text_width: int = 32, seed: int = 0,
                 condition_on_text: bool = True, uniform_attention: bool = False):
        super().__init__()
        self.channels = tuple(channels)
        self.condition_on_text = condition_on_text
        with seeded(seed):
            self.stem = nn.Sequential(nn.Conv2d(3, self.channels[0], 3, stride=2, padding=1), nn.GELU())
            self.stages = nn.ModuleList()
            self.cross_attention = nn.ModuleList()
            previous = self.channels[0]
            for width in self.channels:
                self.stages.append(nn.Sequential(nn.Conv2d(previous, width, 3, stride=2, padding=1), nn.GELU()))
                if condition_on_text:
                    attention = MultiHeadAttention(width, heads=1, kv_dim=text_width)
                    if uniform_attention:
                        for projection in (attention.query, attention.key):
                            nn.init.zeros_(projection.weight)
                            nn.init.zeros_(projection.bias)
                    self.cross_attention.append(attention)
                previous = width
        freeze(self)

    @property
    def required_divisor(self) -> int:
        return 2 ** (len(self.channels) + 1)

    def forward(self, noisy_image: torch.Tensor, condition: TokenBatch) -> FeaturePyramid:
        hidden = self.stem(noisy_image)
        levels, attention = [], []
        for index, stage in enumerate(self.stages):
            hidden = stage(hidden)
            weights = None
            if self.condition_on_text:
                batch, width, height, breadth = hidden.shape
                tokens = hidden.flatten(2).transpose(1, 2)
                attended, weights = self.cross_attention[index](tokens, condition.tokens, condition.mask)
                hidden = (tokens + attended).transpose(1, 2).reshape(batch, width, height, breadth)
            levels.append(hidden)
            attention.append(weights)
        return FeaturePyramid(levels, attention)


class PlainConvBackbone(StubDiffusionBackbone):
    """The same frozen convolutional stages without any text conditioning."""

    def __init__(self, channels: Sequence[int] = (8, 16, 32), text_width: int = 32, seed: int = 0):
        super().__init__(channels, text_width, seed, condition_on_text=False)


class ModuleHookAdapter(FeatureBackbone):
    """
    Expose an externally built denoiser as a FeatureBackbone.

    Forward hooks on ``block_names`` capture the block outputs as pyramid
    levels, finest first. A block that stores its cross-attention weights on a
    ``last_attention`` attribute contributes them to the pyramid.

    Args:
        network: the denoiser; frozen on wrapping
        block_names: dotted sub-module names, finest level first
        channels: output channels of each named block
        call: how to invoke the network, ``call(network, image, condition)``;
            defaults to ``network(image, condition.tokens)``
    """

    def __init__(self, network: nn.Module, block_names: Sequence[str], channels: Sequence[int],
                 call: Optional[Callable[[nn.Module, torch.Tensor, TokenBatch], object]] = None,
                 divisor: int = 1):
        super().__init__()
        if len(block_names) != len(channels):
            raise StructureError("one channel count per hooked block is required")
        self.network = freeze(network)
        self.block_names = tuple(block_names)
        self.channels = tuple(channels)
        self._call = call or (lambda net, image, condition: net(image, condition.tokens))
        self._divisor = divisor
        self._captured: Dict[str, torch.Tensor] = {}
        modules = dict(self.network.named_modules())
        missing = [name for name in self.block_names if name not in modules]
        if missing:
            raise ConfigError(f"adapter blocks not found in network: {missing}")
        for name in self.block_names:
            modules[name].register_forward_hook(self._store(name))

    def _store(self, name: str):
        def hook(module, inputs, output):
            self._captured[name] = output[0] if isinstance(output, (tuple, list)) else output
        return hook

    @property
    def required_divisor(self) -> int:
        return self._divisor

    def forward(self, noisy_image: torch.Tensor, condition: TokenBatch) -> FeaturePyramid:
        self._captured = {}
        self._call(self.network, noisy_image, condition)
        modules = dict(self.network.named_modules())
        levels = [self._captured[name] for name in self.block_names]
        attention = [getattr(modules[name], "last_attention", None) for name in self.block_names]
        return FeaturePyramid(levels, attention)


def load_adapter(factory: str) -> FeatureBackbone:
    """Build an adapter backbone from a ``"package.module:callable"`` factory path."""
    module_name, _, attribute = factory.partition(":")
    if not module_name or not attribute:
        raise ConfigError(f"adapter_factory must look like 'package.module:callable', got {factory!r}")
    try:
        built = getattr(importlib.import_module(module_name), attribute)()
    except (ImportError, AttributeError) as e:
        raise ConfigError(f"could not load adapter factory {factory!r}: {e}") from e
    if not isinstance(built, FeatureBackbone):
        raise ConfigError(f"adapter factory {factory!r} returned {type(built).__name__}, not a FeatureBackbone")
    return built


def extract_pyramid(noisy_image: torch.Tensor, condition: Union[TokenBatch, torch.Tensor],
                    backbone: FeatureBackbone) -> FeaturePyramid:
    """
    Single forward pass of the frozen backbone.

    Args:
        noisy_image: ``(3, H, W)`` or ``(B, 3, H, W)``
        condition: condition tokens, ``(K, d)``, ``(B, K, d)`` or a TokenBatch
        backbone: a frozen FeatureBackbone

    Returns:
        FeaturePyramid of ``backbone.depth`` levels
    """
    if not backbone.frozen:
        raise ConfigError("feature extraction requires a frozen backbone")
    image = noisy_image.unsqueeze(0) if noisy_image.ndim == 3 else noisy_image
    divisor = backbone.required_divisor
    height, width = image.shape[-2:]
    if height % divisor or width % divisor:
        raise ShapeError(f"image {height}x{width} must be divisible by {divisor} for a {backbone.depth}-level pyramid")
    if not isinstance(condition, TokenBatch):
        condition = TokenBatch.dense(condition.unsqueeze(0) if condition.ndim == 2 else condition)
    return backbone(image, condition)


class PyramidAggregator(nn.Module):
    """Learned convex mixing of pyramid levels after resizing and 1x1 projection to a common width."""

    def __init__(self, channels: Sequence[int], width: int):
        super().__init__()
        self.logits = nn.Parameter(torch.zeros(len(channels)))
        self.projections = nn.ModuleList(nn.Conv2d(c, width, kernel_size=1) for c in channels)

    @property
    def weights(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=0)

    def project_level(self, level: torch.Tensor, index: int, size: Tuple[int, int]) -> torch.Tensor:
        if tuple(level.shape[-2:]) != tuple(size):
            level = F.interpolate(level, size=size, mode="bilinear", align_corners=False)
        return self.projections[index](level)

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        if pyramid.depth != self.logits.shape[0]:
            raise StructureError(f"pyramid has {pyramid.depth} levels, mixing weights have {self.logits.shape[0]}")
        size = tuple(pyramid.levels[0].shape[-2:])
        weights = self.weights
        mixed = 0
        for index, level in enumerate(pyramid.levels):
            mixed = mixed + weights[index] * self.project_level(level, index, size)
        return mixed


def aggregate_pyramid(pyramid: FeaturePyramid, aggregator: PyramidAggregator) -> torch.Tensor:
    """``sum_l softmax(logits)_l * project_l(resize(A_v_l))`` at the finest resolution."""
    return aggregator(pyramid)


@dataclass
class AttentionHeatmap:
    heatmap: torch.Tensor  # (H_l, W_l)
    rows: torch.Tensor  # (H_l * W_l, K), every row sums to 1
    level: int
    word_index: int
    token: str


@torch.no_grad()
def export_word_attention(image: torch.Tensor, text: str, backbone: FeatureBackbone, word_index: int, level: int,
                          text_encoder: FrozenTextEncoder) -> AttentionHeatmap:
    """
    Cross-attention from every spatial position of one level to one word of the text.

    Args:
        image: ``(3, H, W)`` image, used clean (step 0)
        text: affordance text conditioning the backbone
        backbone: frozen backbone with cross-attention
        word_index: 0-based index into the tokenized text
        level: 0-based pyramid level
        text_encoder: frozen encoder producing the condition tokens

    Returns:
        AttentionHeatmap of shape ``(H_l, W_l)``
    """
    embedding = text_encoder.encode(text)
    if not 0 <= word_index < len(embedding.words):
        raise AttentionIndexError(f"word index {word_index} outside the {len(embedding.words)} tokens of {text!r}")
    if not 0 <= level < backbone.depth:
        raise AttentionIndexError(f"level {level} outside [0, {backbone.depth})")
    pyramid = extract_pyramid(image, embedding.tokens, backbone)
    weights = pyramid.attention[level]
    if weights is None:
        raise UsageError(f"{type(backbone).__name__} exposes no cross-attention at level {level}")
    rows = weights[0].mean(dim=0)
    height, width = pyramid.levels[level].shape[-2:]
    return AttentionHeatmap(
        heatmap=rows[:, word_index].reshape(height, width),
        rows=rows,
        level=level,
        word_index=word_index,
        token=embedding.words[word_index],
    )


def write_heatmap(heatmap: AttentionHeatmap, path) -> Path:
    """Write the grid as text (metadata line first) and an 8-bit grayscale PNG next to it."""
    path = Path(path)
    grid = heatmap.heatmap.detach().cpu().to(torch.float64).numpy()
    lines = [f"# level={heatmap.level}\tword_index={heatmap.word_index}\ttoken={heatmap.token}"]
    lines += [" ".join(f"{value:.8g}" for value in row) for row in grid]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    span = grid.max() - grid.min()
    scaled = (grid - grid.min()) / span if span > 0 else np.zeros_like(grid)
    raster = path.with_suffix(".png")
    Image.fromarray((scaled * 255).round().astype(np.uint8)).save(raster)
    return raster
