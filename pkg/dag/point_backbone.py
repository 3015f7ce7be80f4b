"""Point cloud encoder and hierarchical feature propagation.

The encoder is a two-stage set abstraction network (farthest point sampling,
ball query grouping, shared per-point perceptron, max pooling) that also emits
a global [CLS] token. Propagation walks back from the deepest level to full
resolution with inverse-squared-distance interpolation over the 3 nearest
coarse points and skip concatenation.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from .errors import PointCountError, StructureError
from .nn_utils import freeze

logger = logging.getLogger(__name__)


def square_distance(src: torch.Tensor, dst: torch.Tensor) -> torch.Tensor:
    """
    Squared Euclidean distance between every source and target point.
    Coincident points give exactly zero.

    Args:
        src: source points ``(B, N, C)``
        dst: target points ``(B, M, C)``

    Returns:
        Squared distances ``(B, N, M)``
    """
    return ((src.unsqueeze(2) - dst.unsqueeze(1)) ** 2).sum(dim=-1)


def index_points(points: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """Gather rows of ``points`` ``(B, N, C)`` by ``idx`` ``(B, S)`` or ``(B, S, K)``."""
    batch = points.shape[0]
    view_shape = [batch] + [1] * (idx.ndim - 1)
    batch_indices = torch.arange(batch, device=points.device).view(view_shape).expand_as(idx)
    return points[batch_indices, idx, :]


def farthest_point_sample(xyz: torch.Tensor, npoint: int) -> torch.Tensor:
    """
    Deterministic farthest point sampling starting from index 0; ties go to the lowest index.

    Args:
        xyz: point coordinates ``(B, N, 3)``
        npoint: number of samples

    Returns:
        Sampled indices ``(B, npoint)``
    """
    batch, count, _ = xyz.shape
    centroids = torch.zeros(batch, npoint, dtype=torch.long, device=xyz.device)
    distance = torch.full((batch, count), float("inf"), dtype=xyz.dtype, device=xyz.device)
    farthest = torch.zeros(batch, dtype=torch.long, device=xyz.device)
    batch_indices = torch.arange(batch, device=xyz.device)
    for i in range(npoint):
        centroids[:, i] = farthest
        centroid = xyz[batch_indices, farthest, :].unsqueeze(1)
        distance = torch.minimum(distance, ((xyz - centroid) ** 2).sum(dim=-1))
        # argmax returns the first maximal index
        farthest = torch.argmax(distance, dim=-1)
    return centroids


def query_ball_point(radius: float, nsample: int, xyz: torch.Tensor, new_xyz: torch.Tensor) -> torch.Tensor:
    """
    Up to ``nsample`` neighbours within ``radius`` of each query, lowest indices first;
    short groups are padded with their first member.

    Args:
        radius: local region radius
        nsample: maximum group size
        xyz: all points ``(B, N, 3)``
        new_xyz: query points ``(B, S, 3)``

    Returns:
        Group indices ``(B, S, nsample)``
    """
    batch, count, _ = xyz.shape
    queries = new_xyz.shape[1]
    group_idx = torch.arange(count, device=xyz.device).view(1, 1, count).repeat(batch, queries, 1)
    group_idx[square_distance(new_xyz, xyz) > radius ** 2] = count
    group_idx = group_idx.sort(dim=-1)[0][:, :, :nsample]
    group_first = group_idx[:, :, :1].expand_as(group_idx)
    mask = group_idx == count
    group_idx[mask] = group_first[mask]
    return group_idx


def shared_mlp(in_channel: int, widths: Sequence[int]) -> nn.Sequential:
    layers: List[nn.Module] = []
    for width in widths:
        layers += [nn.Linear(in_channel, width), nn.GELU()]
        in_channel = width
    return nn.Sequential(*layers)


@dataclass
class PointLevels:
    """Hierarchical point features, level 0 at full resolution.

    ``levels[l]`` is ``(coords [B, N_l, 3], feats [B, N_l, C_l])``; level 0
    features are the raw coordinates.
    """

    levels: List[Tuple[torch.Tensor, torch.Tensor]]

    def __post_init__(self):
        sizes = self.sizes
        if any(coarser >= finer for finer, coarser in zip(sizes, sizes[1:])):
            raise StructureError(f"level sizes must strictly decrease, got {sizes}")

    @property
    def sizes(self) -> List[int]:
        return [coords.shape[1] for coords, _ in self.levels]


class SetAbstraction(nn.Module):
    def __init__(self, radius: float, nsample: int, in_channel: int, widths: Sequence[int]):
        super().__init__()
        self.radius = radius
        self.nsample = nsample
        self.mlp = shared_mlp(in_channel + 3, widths)

    def forward(self, xyz: torch.Tensor, feats: Optional[torch.Tensor], npoint: int):
        """
        Args:
            xyz: coordinates ``(B, N, 3)``
            feats: features ``(B, N, C)`` or ``None`` at the first stage
            npoint: centroids to keep

        Returns:
            Centroids ``(B, npoint, 3)`` and their pooled features ``(B, npoint, C_out)``
        """
        new_xyz = index_points(xyz, farthest_point_sample(xyz, npoint))
        idx = query_ball_point(self.radius, self.nsample, xyz, new_xyz)
        grouped = index_points(xyz, idx) - new_xyz.unsqueeze(2)
        if feats is not None:
            grouped = torch.cat([grouped, index_points(feats, idx)], dim=-1)
        return new_xyz, self.mlp(grouped).max(dim=2)[0]


class PointEncoder(nn.Module):
    """Set abstraction stages plus a [CLS] token from the deepest level's max and mean pools."""

    def __init__(self, level_sizes: Sequence[int] = (512, 128), radii: Sequence[float] = (0.2, 0.4),
                 nsamples: Sequence[int] = (32, 32), channels: Sequence[int] = (64, 128), cls_width: int = 64):
        super().__init__()
        if not (len(level_sizes) == len(radii) == len(nsamples) == len(channels)):
            raise StructureError("level_sizes, radii, nsamples and channels must have equal length")
        self.level_sizes = tuple(level_sizes)
        self.channels = tuple(channels)
        self.stages = nn.ModuleList()
        in_channel = 0
        for radius, nsample, width in zip(radii, nsamples, channels):
            self.stages.append(SetAbstraction(radius, nsample, in_channel, (width // 2, width)))
            in_channel = width
        self.cls = nn.Linear(2 * channels[-1], cls_width)

    def freeze(self) -> "PointEncoder":
        return freeze(self)

    def effective_sizes(self, count: int) -> List[int]:
        """Configured level sizes, shrunk so they stay strictly below the previous level."""
        if count < self.level_sizes[-1]:
            raise PointCountError(f"{count} points is below the deepest level size {self.level_sizes[-1]}")
        sizes, previous = [], count
        for configured in self.level_sizes:
            size = min(configured, previous - 1)
            if size < 1:
                raise PointCountError(f"{count} points cannot fill {len(self.level_sizes)} levels")
            sizes.append(size)
            previous = size
        return sizes

    def forward(self, points: torch.Tensor) -> Tuple[torch.Tensor, PointLevels]:
        """
        Args:
            points: normalized cloud ``(B, N, 3)``

        Returns:
            The [CLS] token ``(B, cls_width)`` and the PointLevels
        """
        sizes = self.effective_sizes(points.shape[1])
        levels = [(points, points)]
        xyz, feats = points, None
        for stage, size in zip(self.stages, sizes):
            xyz, feats = stage(xyz, feats, size)
            levels.append((xyz, feats))
        cls = self.cls(torch.cat([feats.max(dim=1)[0], feats.mean(dim=1)], dim=-1))
        return cls, PointLevels(levels)


def encode_points(points: torch.Tensor, encoder: PointEncoder) -> Tuple[torch.Tensor, PointLevels]:
    return encoder(points.unsqueeze(0) if points.ndim == 2 else points)


def interpolate_features(query_xyz: torch.Tensor, source_xyz: torch.Tensor, source_feats: torch.Tensor,
                         k: int = 3) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Inverse-squared-distance interpolation over the ``k`` nearest sources.

    A query closer than 1e-10 to a source copies that source's feature.

    Args:
        query_xyz: ``(B, N, 3)``
        source_xyz: ``(B, S, 3)``
        source_feats: ``(B, S, C)``
        k: neighbours, reduced to ``S`` when fewer sources exist

    Returns:
        Features ``(B, N, C)``, weights ``(B, N, k')`` and indices ``(B, N, k')`` with ``k' = min(k, S)``
    """
    available = source_xyz.shape[1]
    if available < k:
        logger.debug(f"only {available} source points; interpolating over {available} neighbours")
        k = available
    dists, idx = square_distance(query_xyz, source_xyz).sort(dim=-1, stable=True)
    dists, idx = dists[:, :, :k], idx[:, :, :k]
    reciprocal = 1.0 / dists.clamp_min(1e-30)
    weights = reciprocal / reciprocal.sum(dim=-1, keepdim=True)
    nearest = torch.zeros_like(weights)
    nearest[..., 0] = 1.0
    weights = torch.where((dists[..., :1] < 1e-20), nearest, weights)
    feats = (index_points(source_feats, idx) * weights.unsqueeze(-1)).sum(dim=2)
    return feats, weights, idx


class FeaturePropagation(nn.Module):
    def __init__(self, in_channel: int, widths: Sequence[int], k: int = 3):
        super().__init__()
        self.k = k
        self.mlp = shared_mlp(in_channel, widths)

    def forward(self, fine_xyz, coarse_xyz, fine_feats, coarse_feats):
        interpolated, _, _ = interpolate_features(fine_xyz, coarse_xyz, coarse_feats, self.k)
        return self.mlp(torch.cat([interpolated, fine_feats], dim=-1))


class PointPropagation(nn.Module):
    """Deepest level back to full resolution, ending at the pipeline's common width."""

    def __init__(self, channels: Sequence[int] = (64, 128), width: int = 64, k: int = 3):
        super().__init__()
        widths = [3] + list(channels)
        self.stages = nn.ModuleList()
        current = widths[-1]
        for target in reversed(range(len(channels))):
            out = width if target == 0 else widths[target]
            self.stages.append(FeaturePropagation(current + widths[target], (out, out), k))
            current = out

    def forward(self, levels: PointLevels) -> torch.Tensor:
        if len(levels.levels) < 2:
            raise StructureError("propagation needs at least two levels")
        coarse_xyz, feats = levels.levels[-1]
        for stage, (fine_xyz, fine_feats) in zip(self.stages, reversed(levels.levels[:-1])):
            feats = stage(fine_xyz, coarse_xyz, fine_feats, feats)
            coarse_xyz = fine_xyz
        return feats


def propagate(levels: PointLevels, propagation: PointPropagation) -> torch.Tensor:
    """Per-point features ``[B, N, d]`` aligned with the input point order."""
    return propagation(levels)
