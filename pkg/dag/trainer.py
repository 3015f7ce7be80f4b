"""
Training, checkpointing, evaluation, inference and the other harness operations.

Checkpoint layout (a directory):
    model.pt      state dict of the full DAGModel
    config.txt    the producing RunConfig as ``key = value`` lines
    manifest.txt  config hash, seed, epoch, step and the tail of the loss trace
"""
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from config import Config
from .backbone import AttentionHeatmap, write_heatmap
from .data import (
    AffordanceSample,
    DatasetManifest,
    ManifestEntry,
    StressOptions,
    SyntheticConfig,
    generate_synthetic,
    load_dataset,
    load_image,
    normalize_sample,
    write_manifest,
    write_sample,
)
from .errors import CheckpointError, DatasetError, NumericAbortError, StructureError
from .model import DAGModel
from .objectives import (
    MetricsAccumulator,
    MetricsReport,
    SeedSummary,
    metrics_by_category,
    summarize_seeds,
    total_loss,
)
from .run_config import RunConfig, apply_overrides, load_run_config

logger = logging.getLogger(__name__)

LOSS_TAIL = 10


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic, warn_only=True)


def resize_image(image: torch.Tensor, size: int) -> torch.Tensor:
    if tuple(image.shape[-2:]) == (size, size):
        return image
    return F.interpolate(image.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False)[0].clamp(0, 1)


def prepare_sample(sample: AffordanceSample, image_size: int) -> AffordanceSample:
    """Normalize the cloud and bring the image to the model's resolution."""
    normalized = normalize_sample(sample)
    return AffordanceSample(normalized.points, normalized.labels, resize_image(normalized.image, image_size),
                            normalized.text, normalized.category)


class AffordanceDataset(Dataset):
    def __init__(self, samples: Sequence[AffordanceSample], image_size: int):
        self.samples = [prepare_sample(sample, image_size) for sample in samples]

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> AffordanceSample:
        return self.samples[index]


def collate_samples(samples: List[AffordanceSample]) -> Dict[str, object]:
    counts = {sample.n_points for sample in samples}
    if len(counts) > 1:
        raise StructureError(f"a batch needs equal point counts, got {sorted(counts)}; use batch_size = 1")
    return {
        "points": torch.stack([sample.points for sample in samples]),
        "labels": torch.stack([sample.labels for sample in samples]),
        "images": torch.stack([sample.image for sample in samples]),
        "texts": [sample.text for sample in samples],
        "categories": [sample.category for sample in samples],
    }


def make_loader(samples: Sequence[AffordanceSample], config: RunConfig, shuffle: bool = True) -> DataLoader:
    generator = torch.Generator().manual_seed(config.seed % 2 ** 63)
    return DataLoader(AffordanceDataset(samples, config.image_size), batch_size=config.batch_size,
                      shuffle=shuffle, generator=generator, collate_fn=collate_samples, num_workers=0)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    path: Path
    config: RunConfig
    model: DAGModel
    epoch: int = 0
    step: int = 0
    loss_tail: List[float] = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()


def save_checkpoint(model: DAGModel, path, epoch: int, step: int, loss_trace: Sequence[float]) -> Checkpoint:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    config = model.config
    torch.save(model.state_dict(), path / "model.pt")
    (path / "config.txt").write_text(config.to_text(), encoding="utf-8")
    tail = list(loss_trace[-LOSS_TAIL:])
    manifest = [
        f"config_hash={config.config_hash()}",
        f"seed={config.seed}",
        f"epoch={epoch}",
        f"step={step}",
        "loss_tail=" + ",".join(f"{value:.9g}" for value in tail),
    ]
    (path / "manifest.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")
    logger.info(f"Saved checkpoint at step {step} to {path}")
    return Checkpoint(path=path, config=config, model=model, epoch=epoch, step=step, loss_tail=tail)


def _read_manifest(path: Path) -> Dict[str, str]:
    values = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        key, separator, value = line.partition("=")
        if separator:
            values[key.strip()] = value.strip()
    return values


def load_checkpoint(path, expected_config: Optional[RunConfig] = None) -> Checkpoint:
    """
    Load a checkpoint directory, rejecting corrupted blobs and config mismatches.

    Args:
        path: checkpoint directory
        expected_config: when given, its hash must match the checkpoint's

    Returns:
        Checkpoint with the model in eval mode
    """
    path = Path(path)
    for name in ("model.pt", "config.txt", "manifest.txt"):
        if not (path / name).is_file():
            raise CheckpointError(f"checkpoint {path} is missing {name}")
    manifest = _read_manifest(path / "manifest.txt")
    config = load_run_config(path / "config.txt", env_override=False)
    if manifest.get("config_hash") != config.config_hash():
        raise CheckpointError(f"checkpoint {path}: config.txt does not match the recorded config hash")
    if expected_config is not None and expected_config.config_hash() != config.config_hash():
        raise CheckpointError(f"checkpoint {path} was produced by a different configuration")

    model = DAGModel(config)
    try:
        state = torch.load(path / "model.pt", map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    except Exception as e:
        raise CheckpointError(f"checkpoint {path}: cannot load parameters: {e}") from e
    model.to(Config.DEVICE).eval()
    try:
        tail = [float(value) for value in manifest.get("loss_tail", "").split(",") if value]
        epoch, step = int(manifest.get("epoch", 0)), int(manifest.get("step", 0))
    except ValueError as e:
        raise CheckpointError(f"checkpoint {path}: malformed manifest: {e}") from e
    logger.info(f"Loaded checkpoint {path} (step {step}, config {config.config_hash()[:12]})")
    return Checkpoint(path=path, config=config, model=model, epoch=epoch, step=step, loss_tail=tail)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainingResult:
    checkpoint: Checkpoint
    loss_trace: List[float]
    frozen_checksums_before: Dict[str, str]
    frozen_checksums_after: Dict[str, str]


def _dump_batch(batch: Dict[str, object], out_dir: Path, step: int) -> Path:
    dump = out_dir / f"nan_batch_step{step}.pt"
    torch.save({key: value for key, value in batch.items()}, dump)
    return dump


def train(config: RunConfig, manifest: DatasetManifest, out_dir) -> TrainingResult:
    """
    Optimize every trainable parameter with Adam on BCE + Dice.

    Args:
        config: run configuration
        manifest: training samples
        out_dir: receives ``loss_log.tsv`` and ``checkpoint/``

    Returns:
        TrainingResult with the final checkpoint and the per-step loss trace
    """
    if not manifest.entries:
        raise DatasetError("training manifest is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    seed_everything(config.seed, config.deterministic)
    samples = load_dataset(manifest)
    loader = make_loader(samples, config, shuffle=True)
    device = torch.device(Config.DEVICE)
    model = DAGModel(config).to(device)
    checksums_before = model.frozen_checksums()
    trainable = [parameter for parameter in model.parameters() if parameter.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=config.learning_rate, weight_decay=config.weight_decay)

    loss_trace: List[float] = []
    step, epoch = 0, 0
    model.train()
    with open(out_dir / "loss_log.tsv", "w", encoding="utf-8") as log:
        log.write("step\tepoch\tbce\tdice\ttotal\n")
        for epoch in range(1, config.epochs + 1):
            for batch_index, batch in enumerate(tqdm(loader, desc=f"epoch {epoch}", leave=False)):
                points = batch["points"].to(device)
                labels = batch["labels"].to(device)
                images = batch["images"].to(device)
                mask, _ = model(points, images, batch["texts"])
                losses = total_loss(mask.values, labels)
                if not torch.isfinite(losses.total):
                    dump = _dump_batch(batch, out_dir, step)
                    logger.error(
                        f"Non-finite loss at step {step} (epoch {epoch}, batch {batch_index}); dumped to {dump}"
                    )
                    raise NumericAbortError(f"non-finite loss at epoch {epoch}, batch {batch_index}",
                                            batch_index=batch_index, dump_path=dump)
                optimizer.zero_grad()
                losses.total.backward()
                optimizer.step()
                step += 1

                values = losses.as_floats()
                loss_trace.append(values["total"])
                log.write(f"{step}\t{epoch}\t{values['bce']:.9g}\t{values['dice']:.9g}\t{values['total']:.9g}\n")
                if step % config.log_every == 0:
                    logger.info(f"step {step} epoch {epoch}: bce={values['bce']:.4f} "
                                f"dice={values['dice']:.4f} total={values['total']:.4f}")
                if config.checkpoint_every and step % config.checkpoint_every == 0:
                    save_checkpoint(model, out_dir / f"checkpoint-step{step}", epoch, step, loss_trace)
                if config.max_steps is not None and step >= config.max_steps:
                    break
            logger.info(f"Finished epoch {epoch} at step {step}")
            if config.max_steps is not None and step >= config.max_steps:
                break

    model.eval()
    checkpoint = save_checkpoint(model, out_dir / "checkpoint", epoch, step, loss_trace)
    return TrainingResult(checkpoint, loss_trace, checksums_before, model.frozen_checksums())


# ---------------------------------------------------------------------------
# Evaluation and inference
# ---------------------------------------------------------------------------

def _predictions(model: DAGModel, manifest: DatasetManifest,
                 stress: Optional[StressOptions] = None) -> Iterator[Tuple[str, torch.Tensor, torch.Tensor]]:
    device = next(model.parameters()).device
    for index, sample in enumerate(load_dataset(manifest)):
        if stress is not None:
            sample = stress.apply(sample, index)
        prepared = prepare_sample(sample, model.config.image_size)
        pred = model.predict(prepared.points.to(device), prepared.image.to(device), prepared.text)
        yield prepared.category, pred.cpu(), prepared.labels


def evaluate_model(model: DAGModel, manifest: DatasetManifest,
                   stress: Optional[StressOptions] = None) -> MetricsReport:
    config = model.config
    if stress is not None and stress.active:
        logger.info(f"Evaluating on stressed clouds: crop_front={stress.crop_front}, "
                    f"jitter_sigma={stress.jitter_sigma}")
    accumulator = MetricsAccumulator()
    for _, pred, gt in _predictions(model, manifest, stress):
        accumulator.add(pred, gt, config.miou_mode, config.gt_threshold)
    report = accumulator.report(manifest.split)
    if report.n_auc_skipped:
        logger.warning(f"{report.n_auc_skipped} of {report.n_samples} samples have single-class ground truth; "
                       f"excluded from AUC")
    return report


def evaluate(checkpoint: Checkpoint, manifest: DatasetManifest,
             stress: Optional[StressOptions] = None) -> MetricsReport:
    return evaluate_model(checkpoint.model, manifest, stress)


def evaluate_by_category(checkpoint: Checkpoint, manifest: DatasetManifest,
                         stress: Optional[StressOptions] = None) -> Dict[str, MetricsReport]:
    config = checkpoint.config
    return metrics_by_category(_predictions(checkpoint.model, manifest, stress), manifest.split,
                               config.miou_mode, config.gt_threshold)


def write_mask(values: torch.Tensor, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{value:.9g}\n" for value in values.tolist()), encoding="utf-8")
    return path


def infer(checkpoint: Checkpoint, sample: AffordanceSample, out_path=None,
          stress: Optional[StressOptions] = None) -> torch.Tensor:
    """
    Predict one mask, aligned with the input point order.

    Partial clouds are accepted down to the deepest point level size. With a
    front crop in ``stress`` the mask covers the surviving points only, in
    their original order.
    """
    model = checkpoint.model
    device = next(model.parameters()).device
    if stress is not None:
        sample = stress.apply(sample)
    prepared = prepare_sample(sample, checkpoint.config.image_size)
    values = model.predict(prepared.points.to(device), prepared.image.to(device), prepared.text).cpu()
    if out_path is not None:
        write_mask(values, out_path)
        logger.info(f"Wrote {values.shape[0]} mask values to {out_path}")
    return values


def export_attention(checkpoint: Checkpoint, image_path, text: str, word_index: int, level: int,
                     out_path) -> AttentionHeatmap:
    image = resize_image(load_image(image_path), checkpoint.config.image_size)
    device = next(checkpoint.model.parameters()).device
    heatmap = checkpoint.model.export_attention(image.to(device), text, word_index, level)
    write_heatmap(heatmap, out_path)
    return heatmap


# ---------------------------------------------------------------------------
# Ablation and synthetic data
# ---------------------------------------------------------------------------

@dataclass
class AblationResult:
    config: RunConfig
    trainable_parameters: int
    summary: SeedSummary


def ablate(config: RunConfig, overrides: Sequence[str], manifest: DatasetManifest, out_dir,
           seeds: Optional[Sequence[int]] = None, eval_manifest: Optional[DatasetManifest] = None) -> AblationResult:
    """Train and evaluate one variant, once per seed."""
    variant = apply_overrides(config, overrides) if overrides else config
    seeds = list(seeds) if seeds else [variant.seed]
    out_dir = Path(out_dir)
    reports: Dict[int, MetricsReport] = {}
    parameters = 0
    for seed in seeds:
        seeded_variant = apply_overrides(variant, [f"seed={seed}"])
        result = train(seeded_variant, manifest, out_dir / f"seed-{seed}")
        parameters = result.checkpoint.model.trainable_parameter_count()
        reports[seed] = evaluate(result.checkpoint, eval_manifest or manifest)
        logger.info(f"Variant {list(overrides)} seed {seed}: miou={reports[seed].miou:.4f}")
    return AblationResult(config=variant, trainable_parameters=parameters, summary=summarize_seeds(reports))


def make_synthetic(config: SyntheticConfig, count: int, out_dir) -> Path:
    """Write ``count`` synthetic samples and a ``manifest.tsv`` referencing them."""
    samples = generate_synthetic(config, count)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for index, sample in enumerate(samples):
        points_path, image_path = out_dir / f"sample_{index:03d}.txt", out_dir / f"sample_{index:03d}.png"
        write_sample(sample, points_path, image_path)
        entries.append(ManifestEntry(points_path=points_path, image_path=image_path,
                                     text=sample.text, category=sample.category))
    manifest_path = out_dir / "manifest.tsv"
    write_manifest(DatasetManifest(entries=entries, split="seen"), manifest_path)
    logger.info(f"Wrote {count} synthetic {config.shape_kind} samples to {out_dir}")
    return manifest_path
