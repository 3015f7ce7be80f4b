"""Condition tokens for the backbone and the Affordance Block.

Two frozen encoders live here, a text encoder and an image encoder, plus the
learnable self-prompt captioner that turns the image into pseudo-text tokens.
"""
import logging
import re
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError
from .nn_utils import freeze, seeded, sinusoidal_position_2d

logger = logging.getLogger(__name__)

# Default affordance vocabulary, 17 types.
DEFAULT_AFFORDANCE_VOCAB: Tuple[str, ...] = (
    "grasp", "contain", "lift", "open", "lay", "sit", "support", "wrapgrasp", "pour",
    "move", "display", "push", "listen", "wear", "press", "cut", "stab",
)
NULL_TOKEN = "<null>"


def load_vocabulary(path) -> List[str]:
    """
    Read an affordance vocabulary file.

    Args:
        path: UTF-8 text, one affordance word per line; blank lines are ignored

    Returns:
        Lowercased words in file order, duplicates dropped
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (FileNotFoundError, IsADirectoryError) as e:
        raise ConfigError(f"vocabulary file not found: {path}") from e
    except UnicodeDecodeError as e:
        raise ConfigError(f"vocabulary file {path} is not UTF-8: {e}") from e
    words = list(dict.fromkeys(line.strip().lower() for line in text.splitlines() if line.strip()))
    if not words:
        raise ConfigError(f"vocabulary file {path} has no words")
    logger.info(f"loaded {len(words)} affordance words from {path}")
    return words


def tokenize(text: str) -> List[str]:
    words = re.findall(r"[a-z0-9]+", text.lower())
    return words or [NULL_TOKEN]


@dataclass(frozen=True, eq=False)
class TextEmbedding:
    tokens: torch.Tensor  # (K_txt, d_txt)
    source_text: str
    words: Tuple[str, ...]


@dataclass(frozen=True, eq=False)
class TokenBatch:
    """Padded batch of condition tokens; ``mask`` is ``False`` on padding."""

    tokens: torch.Tensor  # (B, K, d)
    mask: torch.Tensor  # (B, K) bool

    @classmethod
    def dense(cls, tokens: torch.Tensor) -> "TokenBatch":
        return cls(tokens, torch.ones(tokens.shape[:2], dtype=torch.bool, device=tokens.device))

    def masked_mean(self) -> torch.Tensor:
        weights = self.mask.to(self.tokens.dtype).unsqueeze(-1)
        return (self.tokens * weights).sum(dim=1) / weights.sum(dim=1).clamp_min(1.0)


class FrozenTextEncoder(nn.Module):
    """Word-level lookup table standing in for a frozen CLIP text encoder.

    Vocabulary words get their own rows, unknown words share hash buckets and
    empty text maps to a dedicated null row. The table is drawn from ``seed``
    and never trained.
    """

    def __init__(self, width: int = 32, vocabulary: Sequence[str] = DEFAULT_AFFORDANCE_VOCAB,
                 hash_buckets: int = 64, seed: int = 0):
        super().__init__()
        self.width = width
        self.vocabulary = tuple(word.lower() for word in vocabulary)
        self.hash_buckets = hash_buckets
        self._index = {word: i for i, word in enumerate(self.vocabulary)}
        with seeded(seed):
            self.table = nn.Embedding(len(self.vocabulary) + 1 + hash_buckets, width)
            nn.init.normal_(self.table.weight)
        freeze(self)

    @property
    def null_index(self) -> int:
        return len(self.vocabulary)

    def token_index(self, word: str) -> int:
        if word == NULL_TOKEN:
            return self.null_index
        if word in self._index:
            return self._index[word]
        return self.null_index + 1 + zlib.crc32(word.encode("utf-8")) % self.hash_buckets

    def encode(self, text: str) -> TextEmbedding:
        words = tokenize(text)
        indices = torch.tensor([self.token_index(word) for word in words], device=self.table.weight.device)
        return TextEmbedding(tokens=self.table(indices), source_text=text, words=tuple(words))

    def encode_batch(self, texts: Sequence[str]) -> TokenBatch:
        embeddings = [self.encode(text) for text in texts]
        longest = max(embedding.tokens.shape[0] for embedding in embeddings)
        tokens = self.table.weight.new_zeros(len(texts), longest, self.width)
        mask = torch.zeros(len(texts), longest, dtype=torch.bool, device=tokens.device)
        for row, embedding in enumerate(embeddings):
            tokens[row, : embedding.tokens.shape[0]] = embedding.tokens
            mask[row, : embedding.tokens.shape[0]] = True
        return TokenBatch(tokens, mask)

    def null_batch(self, batch_size: int) -> TokenBatch:
        index = torch.full((batch_size, 1), self.null_index, device=self.table.weight.device)
        return TokenBatch.dense(self.table(index))


def encode_affordance_text(text: str, encoder: FrozenTextEncoder) -> TextEmbedding:
    """Frozen token embeddings of the affordance phrase; empty text yields the null token."""
    return encoder.encode(text)


class FrozenImageEncoder(nn.Module):
    """Patch embedding plus a small self-attention stack, drawn from ``seed`` and frozen."""

    def __init__(self, width: int = 32, patch_size: int = 8, layers: int = 2, heads: int = 1, seed: int = 0):
        super().__init__()
        self.width = width
        self.patch_size = patch_size
        with seeded(seed):
            self.patch_embed = nn.Conv2d(3, width, kernel_size=patch_size, stride=patch_size)
            layer = nn.TransformerEncoderLayer(width, heads, dim_feedforward=4 * width, dropout=0.0,
                                               batch_first=True, norm_first=True)
            self.blocks = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        freeze(self)

    def train(self, mode: bool = True):
        # stays in inference mode whatever the surrounding model does
        return super().train(False)

    def patch_tokens(self, image: torch.Tensor) -> torch.Tensor:
        _, _, height, width = image.shape
        if height % self.patch_size or width % self.patch_size:
            raise ShapeError(f"image {height}x{width} is not divisible by patch size {self.patch_size}")
        patches = self.patch_embed(image)
        grid_h, grid_w = patches.shape[-2:]
        tokens = patches.flatten(2).transpose(1, 2)
        return tokens + sinusoidal_position_2d(grid_h, grid_w, self.width).to(tokens)

    def forward(self, image: torch.Tensor, prompts: Optional[torch.Tensor] = None) -> torch.Tensor:
        tokens = self.patch_tokens(image)
        if prompts is not None:
            tokens = torch.cat([prompts.expand(tokens.shape[0], -1, -1), tokens], dim=1)
        return self.blocks(tokens)


def encode_image_with_prompts(image: torch.Tensor, prompts: torch.Tensor, encoder: FrozenImageEncoder) -> torch.Tensor:
    """
    Run the frozen image encoder with learnable prompt tokens prepended.

    Args:
        image: ``(3, H, W)`` or ``(B, 3, H, W)``
        prompts: ``(P, d_img)`` prompt tokens
        encoder: frozen image encoder

    Returns:
        ``(B, d_img)`` mean of the final states at the prompt positions
    """
    if image.ndim == 3:
        image = image.unsqueeze(0)
    states = encoder(image, prompts.unsqueeze(0))
    return states[:, : prompts.shape[0]].mean(dim=1)


class CaptionProjection(nn.Module):
    """Two-layer perceptron mapping an image embedding to ``K_cap`` pseudo-text tokens."""

    def __init__(self, image_width: int, caption_tokens: int, text_width: int, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or 2 * image_width
        self.caption_tokens = caption_tokens
        self.text_width = text_width
        self.hidden = nn.Linear(image_width, hidden)
        self.activation = nn.GELU()
        self.out = nn.Linear(hidden, caption_tokens * text_width)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, image_embedding: torch.Tensor) -> torch.Tensor:
        projected = self.out(self.activation(self.hidden(image_embedding)))
        return projected.reshape(*image_embedding.shape[:-1], self.caption_tokens, self.text_width)


def project_caption(image_embedding: torch.Tensor, projection: CaptionProjection) -> torch.Tensor:
    return projection(image_embedding)


class SelfPromptCaptioner(nn.Module):
    """Implicit captioner: prompted frozen image encoder followed by a learned projection."""

    def __init__(self, encoder: FrozenImageEncoder, prompt_count: int = 8, caption_tokens: int = 4,
                 text_width: int = 32):
        super().__init__()
        self.encoder = encoder
        self.prompts = nn.Parameter(torch.randn(prompt_count, encoder.width) * 0.02)
        self.projection = CaptionProjection(encoder.width, caption_tokens, text_width)

    def embed(self, image: torch.Tensor) -> torch.Tensor:
        return encode_image_with_prompts(image, self.prompts, self.encoder)

    def forward(self, image: torch.Tensor) -> TokenBatch:
        return TokenBatch.dense(project_caption(self.embed(image), self.projection))
