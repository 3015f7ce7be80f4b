"""Run configuration: the ``key = value`` file format, validation, overrides and hashing."""
import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, get_origin

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from config import Config
from .data import SyntheticConfig
from .errors import ConfigError, UnsupportedVariantError

logger = logging.getLogger(__name__)

UNSUPPORTED_VARIANTS = {
    ("captioner", "blip"): (
        "the explicit BLIP captioner needs a pretrained caption generator, which this build does not ship; "
        "use captioner = empty, verb or implicit"
    ),
}


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # optimization
    learning_rate: float = Field(1e-4, gt=0, description="Adam learning rate")
    weight_decay: float = Field(0.0, ge=0, description="Adam weight decay")
    epochs: int = Field(80, gt=0, description="Passes over the training manifest")
    max_steps: Optional[int] = Field(None, gt=0, description="Stop after this many optimizer steps")
    batch_size: int = Field(4, gt=0)
    seed: int = Field(0, ge=0, lt=2 ** 64)
    deterministic: bool = Field(True, description="Deterministic kernels and data order")
    diffusion_step_t: int = Field(0, ge=0, description="Noise step applied before feature extraction")

    # ablation toggles
    affordance_block: bool = Field(True, description="Fuse visual features with text before pooling")
    cls_token: bool = Field(True, description="Fuse the point [CLS] token with the affordance tokens")
    captioner: Literal["empty", "verb", "implicit"] = Field("implicit", description="Backbone condition source")
    extractor: Literal["stub_diffusion", "adapter", "plain_cnn"] = Field("stub_diffusion")
    adapter_factory: Optional[str] = Field(None, description="'package.module:callable' building the adapter")
    block_condition: Literal["text", "caption"] = Field("text", description="Tokens conditioning the Affordance Block")

    # widths
    d: int = Field(64, gt=0, description="Common pipeline width")
    d_txt: int = Field(32, gt=0)
    d_img: int = Field(32, gt=0)
    d_p: int = Field(64, gt=0, description="Point [CLS] width")

    # architecture
    pooling_m: int = Field(4, gt=0, description="Affordance tokens per side after pooling")
    prompt_count: int = Field(8, gt=0)
    caption_tokens: int = Field(4, gt=0)
    patch_size: int = Field(8, gt=0)
    pyramid_channels: List[int] = Field(default_factory=lambda: [8, 16, 32])
    level_sizes: List[int] = Field(default_factory=lambda: [512, 128])
    point_channels: List[int] = Field(default_factory=lambda: [64, 128])
    radii: List[float] = Field(default_factory=lambda: [0.2, 0.4])
    nsample: int = Field(32, gt=0)
    heads: int = Field(1, gt=0)
    blocks: int = Field(1, gt=0)
    ffn_ratio: int = Field(4, gt=0)
    positional_encoding: bool = True
    backbone_seed: int = Field(0, ge=0, description="Seed of the frozen backbone and encoders")
    vocabulary: Optional[str] = Field(None, description="Affordance word list file; built-in list when unset")
    freeze_point_encoder: bool = False

    # data and evaluation
    image_size: int = Field(64, gt=0, description="Images are resized to this side")
    miou_mode: Literal["sweep", "single"] = "sweep"
    gt_threshold: float = Field(0.5, gt=0, lt=1)

    # logging and checkpoints
    log_every: int = Field(10, gt=0)
    checkpoint_every: int = Field(0, ge=0, description="Extra checkpoint every N steps; 0 disables")

    @model_validator(mode="after")
    def _check_structure(self):
        if len(self.pyramid_channels) < 2:
            raise ValueError("pyramid_channels needs at least two levels")
        if not (len(self.level_sizes) == len(self.point_channels) == len(self.radii)):
            raise ValueError("level_sizes, point_channels and radii must have equal length")
        if any(coarser >= finer for finer, coarser in zip(self.level_sizes, self.level_sizes[1:])):
            raise ValueError("level_sizes must strictly decrease")
        if self.d % self.heads or self.d % 4:
            raise ValueError(f"d = {self.d} must be a multiple of 4 and of heads = {self.heads}")
        if self.extractor == "adapter" and not self.adapter_factory:
            raise ValueError("extractor = adapter requires adapter_factory")
        return self

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def to_text(self) -> str:
        lines = []
        for key, value in self.model_dump(mode="json").items():
            if value is None:
                continue
            if isinstance(value, list):
                value = ", ".join(str(item) for item in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def read_key_values(path) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    values: Dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, separator, value = line.partition("=")
        if not separator or not key.strip():
            raise ConfigError(f"{path}:{number}: expected 'key = value'")
        values[key.strip()] = value.strip()
    return values


def _coerce(raw: Dict[str, str], model) -> Dict[str, object]:
    values: Dict[str, object] = {}
    for key, value in raw.items():
        if (key, value.lower()) in UNSUPPORTED_VARIANTS:
            raise UnsupportedVariantError(UNSUPPORTED_VARIANTS[(key, value.lower())])
        field = model.model_fields.get(key)
        if field is None:
            raise ConfigError(f"unknown config key {key!r}")
        if get_origin(field.annotation) is list:
            values[key] = [item.strip() for item in value.split(",") if item.strip()]
        elif value.lower() in ("none", ""):
            values[key] = None
        else:
            values[key] = value
    return values


def _validate(model, values: Dict[str, object]):
    try:
        return model.model_validate(values)
    except ValidationError as e:
        raise ConfigError(f"invalid {model.__name__}: {e}") from e


def apply_overrides(config: RunConfig, overrides: Sequence[str]) -> RunConfig:
    """Apply ``key=value`` strings on top of ``config``."""
    raw = {}
    for item in overrides:
        key, separator, value = item.partition("=")
        if not separator:
            raise ConfigError(f"override {item!r} is not key=value")
        raw[key.strip()] = value.strip()
    merged = config.model_dump()
    merged.update(_coerce(raw, RunConfig))
    return _validate(RunConfig, merged)


def load_run_config(path=None, overrides: Sequence[str] = (), env_override: bool = True) -> RunConfig:
    """
    Read a run configuration file and apply overrides, then the ``DAG_SEED`` environment override.

    Args:
        path: ``key = value`` file, or ``None`` for defaults
        overrides: extra ``key=value`` strings
        env_override: honour ``DAG_SEED``; off when re-reading a saved config

    Returns:
        Validated RunConfig
    """
    raw = read_key_values(path) if path is not None else {}
    config = _validate(RunConfig, _coerce(raw, RunConfig))
    if overrides:
        config = apply_overrides(config, overrides)
    seed_override = Config.seed_override() if env_override else None
    if seed_override is not None:
        logger.info(f"DAG_SEED overrides seed {config.seed} -> {seed_override}")
        config = apply_overrides(config, [f"seed={seed_override}"])
    return config


def load_synthetic_config(path=None) -> SyntheticConfig:
    raw = read_key_values(path) if path is not None else {}
    return _validate(SyntheticConfig, _coerce(raw, SyntheticConfig))
