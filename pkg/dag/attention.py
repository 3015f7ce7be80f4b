"""Scaled dot-product attention shared by the backbone stub, the Affordance Block and the decoder."""
import math
from typing import Optional, Tuple

import torch
import torch.nn as nn

from .errors import StructureError


def scaled_dot_product(query: torch.Tensor, key: torch.Tensor, value: torch.Tensor,
                       key_mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    ``softmax(Q K^T / sqrt(d)) V`` over the last two dimensions.

    Args:
        query: ``(..., n_q, d)``
        key: ``(..., n_k, d)``
        value: ``(..., n_k, d_v)``
        key_mask: optional boolean ``(B, n_k)``; ``False`` marks padding keys

    Returns:
        Tuple of the attended values ``(..., n_q, d_v)`` and the weights ``(..., n_q, n_k)``
    """
    if query.shape[-1] != key.shape[-1]:
        raise StructureError(f"query width {query.shape[-1]} != key width {key.shape[-1]}")
    if key.shape[-2] != value.shape[-2]:
        raise StructureError(f"{key.shape[-2]} keys but {value.shape[-2]} values")
    if key.shape[-2] < 1:
        raise StructureError("attention needs at least one key")

    logits = torch.matmul(query, key.transpose(-2, -1)) / math.sqrt(query.shape[-1])
    if key_mask is not None:
        # broadcast (B, n_k) over any head and query dimensions
        mask = key_mask.reshape(key_mask.shape[0], *([1] * (logits.ndim - 2)), key_mask.shape[-1])
        logits = logits.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    return torch.matmul(weights, value), weights


class MultiHeadAttention(nn.Module):
    """Projected multi-head attention that also returns its weights.

    Keys and values carry no positional information, so the output is
    invariant to the order of the key/value tokens.
    """

    def __init__(self, dim: int, heads: int = 1, kv_dim: Optional[int] = None, zero_init_output: bool = False):
        super().__init__()
        if dim % heads != 0:
            raise StructureError(f"width {dim} is not divisible by {heads} heads")
        kv_dim = kv_dim or dim
        self.dim = dim
        self.heads = heads
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(kv_dim, dim)
        self.value = nn.Linear(kv_dim, dim)
        self.output = nn.Linear(dim, dim)
        if zero_init_output:
            nn.init.zeros_(self.output.weight)
            nn.init.zeros_(self.output.bias)

    def _split(self, tokens: torch.Tensor) -> torch.Tensor:
        batch, length, _ = tokens.shape
        return tokens.reshape(batch, length, self.heads, self.dim // self.heads).transpose(1, 2)

    def forward(self, query: torch.Tensor, key_value: torch.Tensor,
                key_mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
            query: ``(B, n_q, dim)``
            key_value: ``(B, n_k, kv_dim)``
            key_mask: optional boolean ``(B, n_k)``

        Returns:
            Output ``(B, n_q, dim)`` and weights ``(B, heads, n_q, n_k)``
        """
        attended, weights = scaled_dot_product(
            self._split(self.query(query)),
            self._split(self.key(key_value)),
            self._split(self.value(key_value)),
            key_mask,
        )
        batch, _, length, _ = attended.shape
        merged = attended.transpose(1, 2).reshape(batch, length, self.dim)
        return self.output(merged), weights


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, ratio: int = 4, zero_init_output: bool = False):
        super().__init__(nn.Linear(dim, dim * ratio), nn.GELU(), nn.Linear(dim * ratio, dim))
        if zero_init_output:
            nn.init.zeros_(self[2].weight)
            nn.init.zeros_(self[2].bias)
