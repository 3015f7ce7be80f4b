import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Union

import numpy as np
import torch
from PIL import Image
from pydantic import BaseModel, Field, model_validator

from .captioner import DEFAULT_AFFORDANCE_VOCAB
from .errors import (
    DatasetError,
    DegenerateCloudError,
    MissingFileError,
    ParseError,
    SampleValidationError,
    StructureError,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

# Bounding radius of each synthetic primitive around the origin.
SHAPE_BOUNDING_RADIUS: Dict[str, float] = {
    "sphere": 1.0,
    "box": float(np.sqrt(3 * 0.5 ** 2)),
    "cylinder": float(np.sqrt(0.5 ** 2 + 0.5 ** 2)),
}


@dataclass(frozen=True, eq=False)
class AffordanceSample:
    """One (point cloud, per-point label, image, affordance text, category) tuple.

    Attributes:
        points: ``(N, 3)`` float tensor of coordinates.
        labels: ``(N,)`` float tensor of affordance strengths in ``[0, 1]``.
        image: ``(3, H, W)`` float tensor of RGB values in ``[0, 1]``.
        text: affordance phrase.
        category: affordance class identifier.
    """

    points: torch.Tensor
    labels: torch.Tensor
    image: torch.Tensor
    text: str
    category: str

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise StructureError(f"points must be N x 3, got {tuple(self.points.shape)}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.points.shape[0]:
            raise StructureError(
                f"{self.points.shape[0]} points but labels of shape {tuple(self.labels.shape)}"
            )
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise StructureError(f"image must be 3 x H x W, got {tuple(self.image.shape)}")
        for name in ("points", "labels", "image"):
            if not torch.isfinite(getattr(self, name)).all():
                raise SampleValidationError(f"{name} contains NaN or Inf")
        if self.labels.numel() and (self.labels.min() < 0 or self.labels.max() > 1):
            raise SampleValidationError("labels must lie within [0, 1]")
        if self.image.numel() and (self.image.min() < 0 or self.image.max() > 1):
            raise SampleValidationError("image values must lie within [0, 1]")

    @property
    def n_points(self) -> int:
        return int(self.points.shape[0])

    def with_points(self, points: torch.Tensor, labels: Optional[torch.Tensor] = None) -> "AffordanceSample":
        return replace(self, points=points, labels=self.labels if labels is None else labels)


class ManifestEntry(BaseModel):
    points_path: Path = Field(description="Point file with 'x y z label' records")
    image_path: Path = Field(description="RGB interaction image")
    text: str = Field(description="Affordance phrase")
    category: str = Field(description="Affordance class identifier")


class DatasetManifest(BaseModel):
    entries: List[ManifestEntry] = Field(default_factory=list, description="Ordered samples")
    split: Literal["seen", "unseen"] = Field("seen", description="Evaluation partition tag")


class SyntheticConfig(BaseModel):
    shape_kind: Literal["sphere", "box", "cylinder"] = Field("sphere", description="Primitive to sample")
    n_points: int = Field(2048, ge=8, description="Points per cloud")
    region_radius: float = Field(0.5, gt=0, description="Affordance region radius")
    image_size: int = Field(64, gt=0, description="Side of the square depth render")
    seed: int = Field(0, ge=0, lt=2 ** 64, description="Generator seed")

    @model_validator(mode="after")
    def _region_fits_shape(self):
        bound = SHAPE_BOUNDING_RADIUS[self.shape_kind]
        if self.region_radius > bound:
            raise ValueError(
                f"region_radius {self.region_radius} exceeds the {self.shape_kind} bounding radius {bound:.4f}"
            )
        return self


# ---------------------------------------------------------------------------
# Point and image files
# ---------------------------------------------------------------------------

def _parse_point_file(path: Path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) == 3:
                raise StructureError(f"{path}:{line_number}: coordinates without a label")
            if len(fields) != 4:
                raise ParseError(path, line_number, f"expected 'x y z label', got {len(fields)} fields")
            try:
                record = [float(value) for value in fields]
            except ValueError:
                raise ParseError(path, line_number, f"non-numeric field in {line.strip()!r}") from None
            if not np.all(np.isfinite(record)):
                raise SampleValidationError(f"{path}:{line_number}: non-finite value")
            if not 0.0 <= record[3] <= 1.0:
                raise SampleValidationError(f"{path}:{line_number}: label {record[3]} outside [0, 1]")
            rows.append(record)
    if not rows:
        raise StructureError(f"{path}: no point records")
    return np.asarray(rows, dtype=np.float32)


def load_image(path: PathLike) -> torch.Tensor:
    """Read an 8-bit RGB raster as a ``(3, H, W)`` tensor in ``[0, 1]``."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"Image not found at {path}")
    with Image.open(path) as raster:
        array = np.asarray(raster.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(array.copy()).permute(2, 0, 1).contiguous()


def save_image(image: torch.Tensor, path: PathLike) -> None:
    array = (image.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(array).save(path)


def load_points(path: PathLike) -> torch.Tensor:
    """Read a point file into an ``(N, 4)`` tensor of ``x y z label`` records."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"Point file not found at {path}")
    return torch.from_numpy(_parse_point_file(path))


def load_sample(points_path: PathLike, image_path: PathLike, text: str, category: str) -> AffordanceSample:
    """
    Load one sample from a point file and an image.

    Args:
        points_path: text file of ``x y z label`` records, one per line
        image_path: RGB raster
        text: affordance phrase
        category: affordance class identifier

    Returns:
        AffordanceSample with point order preserved from the file
    """
    records = load_points(points_path)
    return AffordanceSample(
        points=records[:, :3].contiguous(),
        labels=records[:, 3].contiguous(),
        image=load_image(image_path),
        text=text,
        category=category,
    )


def write_points(points: torch.Tensor, labels: torch.Tensor, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for (x, y, z), label in zip(points.tolist(), labels.tolist()):
            handle.write(f"{x:.9g} {y:.9g} {z:.9g} {label:.9g}\n")


def write_sample(sample: AffordanceSample, points_path: PathLike, image_path: PathLike) -> None:
    write_points(sample.points, sample.labels, points_path)
    save_image(sample.image, image_path)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def load_manifest(path: PathLike, check_paths: bool = True) -> DatasetManifest:
    """
    Read a tab-separated dataset manifest.

    The first line is ``split=<seen|unseen>``; each further line holds
    ``points_path, image_path, text, category``. Relative paths resolve
    against the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"Manifest not found at {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("split="):
        raise ParseError(path, 1, "first line must be 'split=<seen|unseen>'")
    split = lines[0].split("=", 1)[1].strip()
    if split not in ("seen", "unseen"):
        raise DatasetError(f"{path}: unknown split tag {split!r}")

    entries = []
    for line_number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ParseError(path, line_number, f"expected 4 tab-separated fields, got {len(fields)}")
        points_path, image_path = (path.parent / fields[0], path.parent / fields[1])
        if check_paths:
            for referenced in (points_path, image_path):
                if not referenced.exists():
                    raise MissingFileError(f"{path}:{line_number}: {referenced} does not exist")
        entries.append(ManifestEntry(points_path=points_path, image_path=image_path,
                                     text=fields[2], category=fields[3]))
    return DatasetManifest(entries=entries, split=split)


def write_manifest(manifest: DatasetManifest, path: PathLike) -> None:
    path = Path(path)
    lines = [f"split={manifest.split}"]
    for entry in manifest.entries:
        fields = []
        for referenced in (entry.points_path, entry.image_path):
            try:
                fields.append(str(Path(referenced).resolve().relative_to(path.parent.resolve())))
            except ValueError:
                fields.append(str(referenced))
        lines.append("\t".join(fields + [entry.text, entry.category]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(manifest: DatasetManifest) -> List[AffordanceSample]:
    samples = [load_sample(e.points_path, e.image_path, e.text, e.category) for e in manifest.entries]
    logger.info(f"Loaded {len(samples)} samples ({manifest.split} split)")
    return samples


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def normalize_points(points: torch.Tensor) -> torch.Tensor:
    """Center the cloud on its centroid and scale its largest norm to 1."""
    if points.ndim != 2 or points.shape[0] < 1:
        raise StructureError("normalize_points needs at least one point")
    centered = points.to(torch.float64) - points.to(torch.float64).mean(dim=0, keepdim=True)
    radius = centered.norm(dim=1).max()
    if radius < 1e-12:
        raise DegenerateCloudError("all points coincide; cannot normalize")
    return (centered / radius).to(points.dtype)


def normalize_sample(sample: AffordanceSample) -> AffordanceSample:
    return sample.with_points(normalize_points(sample.points))


def crop_front_hemisphere(sample: AffordanceSample) -> AffordanceSample:
    """Drop the camera-facing half (z > 0) of the cloud, keeping labels aligned."""
    keep = sample.points[:, 2] <= 0
    return sample.with_points(sample.points[keep].contiguous(), sample.labels[keep].contiguous())


def jitter_points(points: torch.Tensor, sigma: float, seed: int = 0) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    noise = torch.randn(points.shape, generator=generator, dtype=torch.float64) * sigma
    return (points.to(torch.float64) + noise).to(points.dtype)


class StressOptions(BaseModel):
    """Degradation applied to clouds before evaluation or inference, to mimic partial and noisy scans."""

    crop_front: bool = Field(False, description="Drop the z > 0 half of each cloud")
    jitter_sigma: float = Field(0.0, ge=0, description="Std of Gaussian point noise; 0 disables")
    seed: int = Field(0, ge=0, lt=2 ** 63, description="Jitter seed; sample i uses seed + i")

    @property
    def active(self) -> bool:
        return self.crop_front or self.jitter_sigma > 0

    def apply(self, sample: AffordanceSample, index: int = 0) -> AffordanceSample:
        if self.crop_front:
            sample = crop_front_hemisphere(sample)
            if sample.n_points == 0:
                raise DegenerateCloudError("no points remain after the front crop")
        if self.jitter_sigma > 0:
            sample = sample.with_points(jitter_points(sample.points, self.jitter_sigma, self.seed + index))
        return sample


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def _sample_surface(kind: str, count: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "sphere":
        directions = rng.standard_normal((count, 3))
        return directions / np.linalg.norm(directions, axis=1, keepdims=True)

    if kind == "box":
        points = rng.uniform(-0.5, 0.5, size=(count, 3))
        faces = rng.integers(0, 6, size=count)
        points[np.arange(count), faces // 2] = np.where(faces % 2 == 0, -0.5, 0.5)
        return points

    # cylinder of radius 0.5 around the y axis, y in [-0.5, 0.5]; sides hold 2/3 of the area
    theta = rng.uniform(0, 2 * np.pi, size=count)
    on_side = rng.uniform(size=count) < 2.0 / 3.0
    radius = np.where(on_side, 0.5, 0.5 * np.sqrt(rng.uniform(size=count)))
    height = np.where(on_side, rng.uniform(-0.5, 0.5, size=count),
                      np.where(rng.uniform(size=count) < 0.5, -0.5, 0.5))
    return np.stack([radius * np.cos(theta), height, radius * np.sin(theta)], axis=1)


def _front_depth(kind: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Camera-facing surface height z(x, y) of the primitive, NaN where the ray misses."""
    if kind == "sphere":
        inside = 1.0 - x ** 2 - y ** 2
        return np.where(inside >= 0, np.sqrt(np.clip(inside, 0, None)), np.nan)
    within = (np.abs(x) <= 0.5) & (np.abs(y) <= 0.5)
    if kind == "box":
        return np.where(within, 0.5, np.nan)
    return np.where(within, np.sqrt(np.clip(0.25 - x ** 2, 0, None)), np.nan)


def gaussian_region_labels(points: np.ndarray, seed_point: np.ndarray, region_radius: float) -> np.ndarray:
    """Soft affordance labels ``exp(-d^2 / (2 sigma^2))`` with ``sigma = region_radius / 2``."""
    sigma = region_radius / 2.0
    squared = np.sum((points - seed_point) ** 2, axis=1)
    return np.exp(-squared / (2.0 * sigma ** 2))


def render_depth(kind: str, image_size: int, seed_point: np.ndarray, region_radius: float) -> np.ndarray:
    """Orthographic depth render along -z with the affordance region brightened."""
    centers = (np.arange(image_size) + 0.5) / image_size * 2.0 - 1.0
    x, y = np.meshgrid(centers, -centers)
    z = _front_depth(kind, x, y)
    hit = ~np.isnan(z)
    depth = np.where(hit, (np.nan_to_num(z) + 1.0) / 2.0, 0.0)
    surface = np.stack([x, y, np.nan_to_num(z)], axis=-1)
    in_region = hit & (np.linalg.norm(surface - seed_point, axis=-1) <= region_radius)
    depth = np.clip(depth + 0.5 * in_region, 0.0, 1.0)
    return np.repeat(depth[None], 3, axis=0)


def generate_synthetic(config: SyntheticConfig, count: int,
                       vocabulary: Sequence[str] = DEFAULT_AFFORDANCE_VOCAB) -> List[AffordanceSample]:
    """
    Generate a deterministic synthetic dataset.

    Args:
        config: primitive, size and seed of the generator
        count: number of samples
        vocabulary: affordance words drawn as text/category

    Returns:
        List of samples, a pure function of ``(config, count)``
    """
    if count < 1:
        raise DatasetError("count must be a positive integer")
    rng = np.random.default_rng(config.seed)
    samples = []
    for _ in range(count):
        points = _sample_surface(config.shape_kind, config.n_points, rng)
        facing = np.flatnonzero(points[:, 2] >= 0)
        if facing.size == 0:
            facing = np.arange(config.n_points)
        seed_point = points[facing[rng.integers(facing.size)]]
        labels = gaussian_region_labels(points, seed_point, config.region_radius)
        image = render_depth(config.shape_kind, config.image_size, seed_point, config.region_radius)
        word = vocabulary[int(rng.integers(len(vocabulary)))]
        samples.append(AffordanceSample(
            points=torch.from_numpy(points.astype(np.float32)),
            labels=torch.from_numpy(labels.astype(np.float32)),
            image=torch.from_numpy(image.astype(np.float32)),
            text=word,
            category=word,
        ))
    return samples
