"""Fusion of the aggregated visual features with affordance text into pooled affordance tokens."""
from dataclasses import dataclass
from typing import Dict, List, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import FeedForward, MultiHeadAttention
from .captioner import TokenBatch
from .errors import PoolingConfigError, StructureError
from .nn_utils import sinusoidal_position_2d


@dataclass
class VisualTokens:
    tokens: torch.Tensor  # (B, S, d) with S = H_1 * W_1
    grid: Tuple[int, int]

    def __post_init__(self):
        if self.tokens.shape[1] != self.grid[0] * self.grid[1]:
            raise StructureError(f"{self.tokens.shape[1]} tokens do not fill a {self.grid} grid")

    @classmethod
    def from_map(cls, feature_map: torch.Tensor) -> "VisualTokens":
        height, width = feature_map.shape[-2:]
        return cls(feature_map.flatten(2).transpose(1, 2), (height, width))


@dataclass
class AffordanceTokens:
    tokens: torch.Tensor  # (B, M, d) with M = m * m
    pool_size: int

    @property
    def count(self) -> int:
        return self.tokens.shape[1]


class ScaleModulation(nn.Module):
    """``v * (1 + gamma(mean text token))``; gamma starts at zero so the block starts as the identity."""

    def __init__(self, width: int):
        super().__init__()
        self.gamma = nn.Linear(width, width)
        nn.init.zeros_(self.gamma.weight)
        nn.init.zeros_(self.gamma.bias)

    def forward(self, visual: torch.Tensor, text: TokenBatch) -> torch.Tensor:
        return visual * (1.0 + self.gamma(text.masked_mean())).unsqueeze(1)


def scale_modulate(visual: VisualTokens, text: TokenBatch, modulation: ScaleModulation) -> VisualTokens:
    """Text-driven channel scaling of the visual tokens; ``text`` must already be lifted to the visual width."""
    return VisualTokens(modulation(visual.tokens, text), visual.grid)


class AffordanceBlock(nn.Module):
    """
    Scale modulation, then self-attention, text cross-attention and a feed-forward
    layer, each with a residual connection followed by layer normalization.
    """

    def __init__(self, width: int, text_width: int, heads: int = 1, ffn_ratio: int = 4,
                 zero_init_residual: bool = False):
        super().__init__()
        self.text_lift = nn.Linear(text_width, width)
        self.modulation = ScaleModulation(width)
        self.self_attention = MultiHeadAttention(width, heads, zero_init_output=zero_init_residual)
        self.norm1 = nn.LayerNorm(width)
        self.cross_attention = MultiHeadAttention(width, heads, zero_init_output=zero_init_residual)
        self.norm2 = nn.LayerNorm(width)
        self.ffn = FeedForward(width, ffn_ratio, zero_init_output=zero_init_residual)
        self.norm3 = nn.LayerNorm(width)

    def forward(self, visual: VisualTokens, text: TokenBatch) -> Tuple[VisualTokens, Dict[str, torch.Tensor]]:
        lifted = TokenBatch(self.text_lift(text.tokens), text.mask)
        hidden = scale_modulate(visual, lifted, self.modulation).tokens
        attended, self_weights = self.self_attention(hidden, hidden)
        hidden = self.norm1(hidden + attended)
        attended, cross_weights = self.cross_attention(hidden, lifted.tokens, lifted.mask)
        hidden = self.norm2(hidden + attended)
        hidden = self.norm3(hidden + self.ffn(hidden))
        return VisualTokens(hidden, visual.grid), {"self": self_weights, "cross": cross_weights}


def affordance_block(visual: VisualTokens, text: TokenBatch, block: AffordanceBlock) -> VisualTokens:
    return block(visual, text)[0]


def pool_tokens(fused: VisualTokens, pool_size: int) -> AffordanceTokens:
    """Adaptive average pooling of the token grid to ``pool_size x pool_size`` tokens."""
    height, width = fused.grid
    if pool_size < 1 or pool_size > min(height, width):
        raise PoolingConfigError(f"pool size {pool_size} does not fit a {height}x{width} token grid")
    batch, _, channels = fused.tokens.shape
    feature_map = fused.tokens.transpose(1, 2).reshape(batch, channels, height, width)
    pooled = F.adaptive_avg_pool2d(feature_map, pool_size)
    return AffordanceTokens(pooled.flatten(2).transpose(1, 2), pool_size)


class AffordanceFusion(nn.Module):
    """Positional encoding, a stack of Affordance Blocks and grid pooling."""

    def __init__(self, width: int, text_width: int, blocks: int = 1, heads: int = 1, ffn_ratio: int = 4,
                 pool_size: int = 4, positional_encoding: bool = True):
        super().__init__()
        if blocks < 1:
            raise StructureError("at least one Affordance Block is required")
        self.width = width
        self.pool_size = pool_size
        self.positional_encoding = positional_encoding
        self.blocks = nn.ModuleList(
            AffordanceBlock(width, text_width, heads, ffn_ratio) for _ in range(blocks)
        )

    def forward(self, feature_map: torch.Tensor,
                text: TokenBatch) -> Tuple[AffordanceTokens, List[Dict[str, torch.Tensor]]]:
        visual = VisualTokens.from_map(feature_map)
        if self.positional_encoding:
            encoding = sinusoidal_position_2d(*visual.grid, self.width).to(visual.tokens)
            visual = VisualTokens(visual.tokens + encoding, visual.grid)
        attention = []
        for block in self.blocks:
            visual, weights = block(visual, text)
            attention.append(weights)
        return pool_tokens(visual, self.pool_size), attention
