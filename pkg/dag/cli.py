"""``dag`` command line: train, eval, infer, export-attn, make-synth and ablate."""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from config import Config
from .data import StressOptions, SyntheticConfig, load_manifest, load_sample
from .errors import DagError, UsageError
from .objectives import write_metrics_report, write_seed_summary
from .run_config import load_run_config, load_synthetic_config
from . import trainer

logger = logging.getLogger(__name__)

ABLATION_SYNTHETIC_COUNT = 8


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_stress_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--crop-front", action="store_true", help="Drop the z > 0 half of each cloud first")
    parser.add_argument("--jitter", type=float, default=0.0, metavar="SIGMA", help="Gaussian point noise std")
    parser.add_argument("--jitter-seed", type=int, default=0)


def _stress_options(args) -> StressOptions:
    return StressOptions(crop_front=args.crop_front, jitter_sigma=args.jitter, seed=args.jitter_seed)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dag", description="Diffusion-feature 3D affordance grounding")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="Train a model and write a checkpoint")
    train.add_argument("--config", type=Path, help="key = value run config")
    train.add_argument("--data", type=Path, required=True, help="Training manifest")
    train.add_argument("--out", type=Path, required=True, help="Output directory")
    train.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    evaluate = commands.add_parser("eval", help="Evaluate a checkpoint on a manifest")
    evaluate.add_argument("--ckpt", type=Path, required=True)
    evaluate.add_argument("--data", type=Path, required=True)
    evaluate.add_argument("--by-category", action="store_true", help="Also report each category")
    evaluate.add_argument("--out", type=Path, help="Write the report here as well")
    _add_stress_arguments(evaluate)

    infer = commands.add_parser("infer", help="Predict the affordance mask of one sample")
    infer.add_argument("--ckpt", type=Path, required=True)
    infer.add_argument("--points", type=Path, required=True)
    infer.add_argument("--image", type=Path, required=True)
    infer.add_argument("--text", required=True)
    infer.add_argument("--category", default="")
    infer.add_argument("--out", type=Path, required=True)
    _add_stress_arguments(infer)

    export = commands.add_parser("export-attn", help="Export one word's cross-attention heatmap")
    export.add_argument("--ckpt", type=Path, required=True)
    export.add_argument("--image", type=Path, required=True)
    export.add_argument("--text", required=True)
    export.add_argument("--word", type=int, required=True, help="0-based token index")
    export.add_argument("--level", type=int, required=True, help="0-based pyramid level")
    export.add_argument("--out", type=Path, required=True)

    synth = commands.add_parser("make-synth", help="Generate a synthetic dataset")
    synth.add_argument("--config", type=Path, help="key = value synthetic config")
    synth.add_argument("--count", type=int, required=True)
    synth.add_argument("--out", type=Path, required=True)

    ablate = commands.add_parser("ablate", help="Train and evaluate one ablation variant")
    ablate.add_argument("--config", type=Path)
    ablate.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    ablate.add_argument("--data", type=Path, help="Training manifest; a synthetic set is generated if omitted")
    ablate.add_argument("--eval-data", type=Path, help="Evaluation manifest; defaults to the training one")
    ablate.add_argument("--seeds", help="Comma-separated seeds, one run each")
    ablate.add_argument("--out", type=Path, default=Path("ablation"))
    return parser


def _print_lines(lines: List[str]) -> None:
    for line in lines:
        print(line)


def _run_train(args) -> None:
    config = load_run_config(args.config, args.overrides)
    result = trainer.train(config, load_manifest(args.data), args.out)
    print(f"checkpoint\t{result.checkpoint.path}")
    print(f"final_loss\t{result.loss_trace[-1]:.6f}" if result.loss_trace else "final_loss\tundefined")


def _run_eval(args) -> None:
    stress = _stress_options(args)
    checkpoint = trainer.load_checkpoint(args.ckpt)
    manifest = load_manifest(args.data)
    report = trainer.evaluate(checkpoint, manifest, stress)
    by_category = trainer.evaluate_by_category(checkpoint, manifest, stress) if args.by_category else {}
    _print_lines(report.as_lines())
    for category, category_report in by_category.items():
        _print_lines([f"category.{category}.{line}" for line in category_report.as_lines()])
    if args.out:
        write_metrics_report(report, args.out, by_category)


def _run_infer(args) -> None:
    stress = _stress_options(args)
    checkpoint = trainer.load_checkpoint(args.ckpt)
    sample = load_sample(args.points, args.image, args.text, args.category or args.text)
    trainer.infer(checkpoint, sample, args.out, stress)


def _run_export(args) -> None:
    checkpoint = trainer.load_checkpoint(args.ckpt)
    heatmap = trainer.export_attention(checkpoint, args.image, args.text, args.word, args.level, args.out)
    print(f"token\t{heatmap.token}")


def _run_synth(args) -> None:
    config = load_synthetic_config(args.config)
    print(trainer.make_synthetic(config, args.count, args.out))


def _parse_seeds(raw: Optional[str]) -> Optional[List[int]]:
    if not raw:
        return None
    try:
        return [int(seed) for seed in raw.split(",") if seed.strip()]
    except ValueError as e:
        raise UsageError(f"--seeds must be comma-separated integers: {e}") from e


def _run_ablate(args) -> None:
    config = load_run_config(args.config)
    data = args.data
    if data is None:
        data = trainer.make_synthetic(SyntheticConfig(n_points=512, region_radius=1.0, seed=config.seed),
                                      ABLATION_SYNTHETIC_COUNT, args.out / "synthetic")
    manifest = load_manifest(data)
    eval_manifest = load_manifest(args.eval_data) if args.eval_data else None
    result = trainer.ablate(config, args.overrides, manifest, args.out, _parse_seeds(args.seeds), eval_manifest)
    summary_path = write_seed_summary(result.summary, args.out / "summary.txt")
    print(f"trainable_parameters\t{result.trainable_parameters}")
    _print_lines(summary_path.read_text(encoding="utf-8").splitlines())


COMMANDS = {
    "train": _run_train,
    "eval": _run_eval,
    "infer": _run_infer,
    "export-attn": _run_export,
    "make-synth": _run_synth,
    "ablate": _run_ablate,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command and return its exit code: 0 ok, 1 usage, 2 data, 3 checkpoint, 4 numeric abort."""
    logging.basicConfig(level=Config.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except DagError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except ValidationError as e:
        logger.error(f"invalid configuration: {e}")
        return UsageError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
