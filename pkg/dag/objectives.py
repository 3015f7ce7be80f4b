"""Training objective (BCE + Dice) and the four evaluation metrics: AUC, mIoU, SIM, MAE."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, Field
from sklearn.metrics import roc_auc_score

from .errors import SampleValidationError, StructureError

logger = logging.getLogger(__name__)

PROBABILITY_CLAMP = 1e-7
DICE_SMOOTHING = 1.0
SWEEP_THRESHOLDS = np.round(np.arange(1, 100) / 100.0, 2)

ArrayLike = Union[np.ndarray, torch.Tensor, Sequence[float]]


def _check_shapes(pred: torch.Tensor, gt: torch.Tensor) -> None:
    if pred.shape != gt.shape:
        raise StructureError(f"prediction shape {tuple(pred.shape)} != ground truth shape {tuple(gt.shape)}")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def bce_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy with predictions clamped to ``[1e-7, 1 - 1e-7]``."""
    _check_shapes(pred, gt)
    pred = pred.clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP)
    return -(gt * torch.log(pred) + (1.0 - gt) * torch.log(1.0 - pred)).mean()


def dice_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """``1 - (2 sum(p g) + 1) / (sum(p) + sum(g) + 1)`` per sample, averaged over the batch."""
    _check_shapes(pred, gt)
    intersection = (pred * gt).sum(dim=-1)
    denominator = pred.sum(dim=-1) + gt.sum(dim=-1)
    return (1.0 - (2.0 * intersection + DICE_SMOOTHING) / (denominator + DICE_SMOOTHING)).mean()


@dataclass
class LossBreakdown:
    bce: torch.Tensor
    dice: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {"bce": float(self.bce), "dice": float(self.dice), "total": float(self.total)}


def total_loss(pred: torch.Tensor, gt: torch.Tensor) -> LossBreakdown:
    bce = bce_loss(pred, gt)
    dice = dice_loss(pred, gt)
    return LossBreakdown(bce=bce, dice=dice, total=bce + dice)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _as_arrays(pred: ArrayLike, gt: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    pred_array = np.asarray(pred.detach().cpu() if isinstance(pred, torch.Tensor) else pred, dtype=np.float64)
    gt_array = np.asarray(gt.detach().cpu() if isinstance(gt, torch.Tensor) else gt, dtype=np.float64)
    if pred_array.shape != gt_array.shape:
        raise StructureError(f"prediction shape {pred_array.shape} != ground truth shape {gt_array.shape}")
    return pred_array.ravel(), gt_array.ravel()


def metric_auc(pred: ArrayLike, gt: ArrayLike, gt_threshold: float = 0.5) -> Optional[float]:
    """Tie-corrected ROC AUC against ``gt > gt_threshold``; ``None`` without both classes."""
    pred_array, gt_array = _as_arrays(pred, gt)
    positives = gt_array > gt_threshold
    if positives.all() or not positives.any():
        return None
    return float(roc_auc_score(positives, pred_array))


def _iou(predicted: np.ndarray, actual: np.ndarray) -> float:
    union = np.logical_or(predicted, actual).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(predicted, actual).sum() / union)


def metric_miou(pred: ArrayLike, gt: ArrayLike, mode: Literal["sweep", "single"] = "sweep",
                gt_threshold: float = 0.5) -> float:
    """
    IoU of the thresholded prediction against the binarized ground truth.

    Args:
        pred: predicted mask values
        gt: ground-truth mask values
        mode: ``"sweep"`` averages over thresholds 0.01..0.99, ``"single"`` uses 0.5
        gt_threshold: ground-truth binarization threshold

    Returns:
        IoU in [0, 1]; an empty union counts as 1
    """
    pred_array, gt_array = _as_arrays(pred, gt)
    actual = gt_array > gt_threshold
    thresholds = SWEEP_THRESHOLDS if mode == "sweep" else (0.5,)
    return float(np.mean([_iou(pred_array > threshold, actual) for threshold in thresholds]))


def metric_sim(pred: ArrayLike, gt: ArrayLike) -> float:
    """Histogram intersection of the two sum-normalized maps."""
    pred_array, gt_array = _as_arrays(pred, gt)
    if (pred_array < 0).any() or (gt_array < 0).any():
        raise SampleValidationError("SIM is undefined for negative map values")
    pred_sum, gt_sum = pred_array.sum(), gt_array.sum()
    if pred_sum == 0 and gt_sum == 0:
        return 1.0
    if pred_sum == 0 or gt_sum == 0:
        return 0.0
    return min(1.0, float(np.minimum(pred_array / pred_sum, gt_array / gt_sum).sum()))


def metric_mae(pred: ArrayLike, gt: ArrayLike) -> float:
    pred_array, gt_array = _as_arrays(pred, gt)
    return float(np.abs(pred_array - gt_array).mean())


class MetricsReport(BaseModel):
    auc: Optional[float] = Field(None, ge=0.0, le=1.0, description="Mean AUC over samples with both classes")
    miou: float = Field(..., ge=0.0, le=1.0)
    sim: float = Field(..., ge=0.0, le=1.0)
    mae: float = Field(..., ge=0.0)
    n_samples: int = Field(..., ge=0)
    n_auc_skipped: int = Field(0, ge=0, description="Samples with a single-class ground truth")
    split: str = Field("seen")

    def as_lines(self) -> List[str]:
        auc = "undefined" if self.auc is None else f"{self.auc:.6f}"
        return [
            f"auc\t{auc}",
            f"miou\t{self.miou:.6f}",
            f"sim\t{self.sim:.6f}",
            f"mae\t{self.mae:.6f}",
            f"n_samples\t{self.n_samples}",
            f"n_auc_skipped\t{self.n_auc_skipped}",
            f"split\t{self.split}",
        ]


@dataclass
class MetricsAccumulator:
    """Running sums of per-sample metrics; ``merge`` is associative and commutative."""

    auc_sum: float = 0.0
    auc_count: int = 0
    miou_sum: float = 0.0
    sim_sum: float = 0.0
    mae_sum: float = 0.0
    n_samples: int = 0
    n_auc_skipped: int = 0

    def add(self, pred: ArrayLike, gt: ArrayLike, miou_mode: str = "sweep", gt_threshold: float = 0.5) -> None:
        auc = metric_auc(pred, gt, gt_threshold)
        if auc is None:
            logger.debug("single-class ground truth; sample excluded from AUC")
            self.n_auc_skipped += 1
        else:
            self.auc_sum += auc
            self.auc_count += 1
        self.miou_sum += metric_miou(pred, gt, miou_mode, gt_threshold)
        self.sim_sum += metric_sim(pred, gt)
        self.mae_sum += metric_mae(pred, gt)
        self.n_samples += 1

    def merge(self, other: "MetricsAccumulator") -> "MetricsAccumulator":
        return MetricsAccumulator(
            auc_sum=self.auc_sum + other.auc_sum,
            auc_count=self.auc_count + other.auc_count,
            miou_sum=self.miou_sum + other.miou_sum,
            sim_sum=self.sim_sum + other.sim_sum,
            mae_sum=self.mae_sum + other.mae_sum,
            n_samples=self.n_samples + other.n_samples,
            n_auc_skipped=self.n_auc_skipped + other.n_auc_skipped,
        )

    def report(self, split: str = "seen") -> MetricsReport:
        count = max(self.n_samples, 1)
        return MetricsReport(
            auc=self.auc_sum / self.auc_count if self.auc_count else None,
            miou=self.miou_sum / count,
            sim=self.sim_sum / count,
            mae=self.mae_sum / count,
            n_samples=self.n_samples,
            n_auc_skipped=self.n_auc_skipped,
            split=split,
        )


def metrics_by_category(results: Iterable[Tuple[str, ArrayLike, ArrayLike]], split: str = "seen",
                        miou_mode: str = "sweep", gt_threshold: float = 0.5) -> Dict[str, MetricsReport]:
    """Group ``(category, pred, gt)`` triples and report each category separately."""
    groups: Dict[str, MetricsAccumulator] = {}
    for category, pred, gt in results:
        groups.setdefault(category, MetricsAccumulator()).add(pred, gt, miou_mode, gt_threshold)
    return {category: groups[category].report(split) for category in sorted(groups)}


@dataclass
class SeedSummary:
    per_seed: Dict[int, MetricsReport]
    mean: Dict[str, float] = field(default_factory=dict)
    std: Dict[str, float] = field(default_factory=dict)


def summarize_seeds(per_seed: Mapping[int, MetricsReport]) -> SeedSummary:
    """Mean and population standard deviation of each metric across seeds; undefined AUCs are left out."""
    summary = SeedSummary(per_seed=dict(per_seed))
    for name in ("auc", "miou", "sim", "mae"):
        values = [getattr(report, name) for report in per_seed.values() if getattr(report, name) is not None]
        if values:
            summary.mean[name] = float(np.mean(values))
            summary.std[name] = float(np.std(values))
    return summary


def write_metrics_report(report: MetricsReport, path,
                         by_category: Optional[Mapping[str, MetricsReport]] = None) -> Path:
    """One ``metric<TAB>value`` line per entry; category reports follow under ``category.<name>.`` keys."""
    lines = report.as_lines()
    for category, category_report in (by_category or {}).items():
        lines += [f"category.{category}.{line}" for line in category_report.as_lines()]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_seed_summary(summary: SeedSummary, path) -> Path:
    lines = []
    for seed, report in summary.per_seed.items():
        lines += [f"seed.{seed}.{line}" for line in report.as_lines()]
    for name, value in summary.mean.items():
        lines.append(f"mean.{name}\t{value:.6f}")
        lines.append(f"std.{name}\t{summary.std[name]:.6f}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
