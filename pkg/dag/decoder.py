"""Per-point affordance decoding from the [CLS] token, affordance tokens and propagated point features."""
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn

from .affordance_block import AffordanceTokens
from .attention import FeedForward, MultiHeadAttention, scaled_dot_product
from .errors import StructureError


@dataclass
class FusedQuery:
    token: torch.Tensor  # (B, 1, d)


@dataclass
class PerPointFusion:
    feats: torch.Tensor  # (B, N, d)


@dataclass
class AffordanceMask:
    values: torch.Tensor  # (B, N) in [0, 1]
    logits: torch.Tensor

    @property
    def n_points(self) -> int:
        return self.values.shape[-1]


def cross_attention(query: torch.Tensor, key: torch.Tensor, value: torch.Tensor) -> torch.Tensor:
    """Unprojected ``softmax(Q K^T / sqrt(d)) V``."""
    return scaled_dot_product(query, key, value)[0]


class _AttentionResidual(nn.Module):
    """Cross-attention and feed-forward, each followed by a residual add and layer norm."""

    def __init__(self, width: int, heads: int = 1, ffn_ratio: int = 4):
        super().__init__()
        self.attention = MultiHeadAttention(width, heads)
        self.norm1 = nn.LayerNorm(width)
        self.ffn = FeedForward(width, ffn_ratio)
        self.norm2 = nn.LayerNorm(width)

    def forward(self, query: torch.Tensor, key_value: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        attended, weights = self.attention(query, key_value)
        hidden = self.norm1(query + attended)
        return self.norm2(hidden + self.ffn(hidden)), weights


class GlobalFusion(_AttentionResidual):
    def __init__(self, cls_width: int, width: int, heads: int = 1, ffn_ratio: int = 4):
        super().__init__(width, heads, ffn_ratio)
        self.cls_lift = nn.Linear(cls_width, width)

    def forward(self, cls: torch.Tensor, aff: AffordanceTokens) -> Tuple[FusedQuery, torch.Tensor]:
        query = self.cls_lift(cls).unsqueeze(1)
        fused, weights = super().forward(query, aff.tokens)
        return FusedQuery(fused), weights


def fuse_global(cls: torch.Tensor, aff: AffordanceTokens, fusion: GlobalFusion) -> FusedQuery:
    """The [CLS] token attends to the affordance tokens."""
    return fusion(cls, aff)[0]


class PointFusion(_AttentionResidual):
    def forward(self, point_feats: torch.Tensor, fused: Optional[FusedQuery],
                aff: AffordanceTokens) -> Tuple[PerPointFusion, torch.Tensor]:
        key_value = aff.tokens if fused is None else torch.cat([fused.token, aff.tokens], dim=1)
        if key_value.shape[1] < 1:
            raise StructureError("point fusion needs at least one key token")
        hidden, weights = super().forward(point_feats, key_value)
        return PerPointFusion(hidden), weights


def fuse_points(point_feats: torch.Tensor, fused: Optional[FusedQuery], aff: AffordanceTokens,
                fusion: PointFusion) -> PerPointFusion:
    """
    Every point queries the fused [CLS] token and the affordance tokens.

    Args:
        point_feats: ``(B, N, d)`` propagated point features
        fused: output of :func:`fuse_global`, or ``None`` when the [CLS] path is disabled
        aff: affordance tokens ``(B, M, d)``
        fusion: the point fusion module

    Returns:
        PerPointFusion with one row per input point
    """
    return fusion(point_feats, fused, aff)[0]


class MaskHead(nn.Module):
    def __init__(self, width: int, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or width
        self.hidden = nn.Linear(width, hidden)
        self.activation = nn.GELU()
        self.out = nn.Linear(hidden, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, fusion: PerPointFusion) -> AffordanceMask:
        logits = self.out(self.activation(self.hidden(fusion.feats))).squeeze(-1)
        return AffordanceMask(torch.sigmoid(logits), logits)


def predict_mask(fusion: PerPointFusion, head: MaskHead) -> AffordanceMask:
    return head(fusion)


class AffordanceDecoder(nn.Module):
    def __init__(self, width: int, cls_width: int, heads: int = 1, ffn_ratio: int = 4, use_cls: bool = True):
        super().__init__()
        self.global_fusion = GlobalFusion(cls_width, width, heads, ffn_ratio) if use_cls else None
        self.point_fusion = PointFusion(width, heads, ffn_ratio)
        self.head = MaskHead(width)

    def forward(self, cls: torch.Tensor, aff: AffordanceTokens,
                point_feats: torch.Tensor) -> Tuple[AffordanceMask, Dict[str, torch.Tensor]]:
        attention: Dict[str, torch.Tensor] = {}
        fused = None
        if self.global_fusion is not None:
            fused, attention["global"] = self.global_fusion(cls, aff)
        fusion, attention["points"] = self.point_fusion(point_feats, fused, aff)
        return self.head(fusion), attention
