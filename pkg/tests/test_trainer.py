import shutil

import pytest
import torch

from dag import trainer
from dag.data import (
    DatasetManifest,
    StressOptions,
    SyntheticConfig,
    crop_front_hemisphere,
    generate_synthetic,
    load_dataset,
    load_manifest,
)
from dag.errors import CheckpointError, DatasetError, NumericAbortError, PointCountError
from dag.model import DAGModel
from dag.objectives import LossBreakdown
from dag.trainer import (
    ablate,
    evaluate,
    evaluate_by_category,
    evaluate_model,
    export_attention,
    infer,
    load_checkpoint,
    make_synthetic,
    train,
)
from tests.conftest import tiny_config


def copy_checkpoint(trained, tmp_path):
    return shutil.copytree(trained.checkpoint.path, tmp_path / "checkpoint")


class TestTraining:
    def test_empty_manifest(self, config, tmp_path):
        with pytest.raises(DatasetError):
            train(config, DatasetManifest(entries=[]), tmp_path)

    def test_writes_checkpoint_and_loss_log(self, trained):
        path = trained.checkpoint.path
        assert {"model.pt", "config.txt", "manifest.txt"} <= {p.name for p in path.iterdir()}
        lines = (path.parent / "loss_log.tsv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "step\tepoch\tbce\tdice\ttotal"
        assert len(lines) == 1 + 10
        assert len(trained.loss_trace) == 10
        assert trained.checkpoint.step == 10

    def test_frozen_parts_are_untouched(self, trained):
        assert trained.frozen_checksums_before == trained.frozen_checksums_after
        assert set(trained.frozen_checksums_before) == {"backbone", "text_encoder", "image_encoder"}

    def test_runs_are_deterministic(self, synthetic_manifest, tmp_path):
        config = tiny_config(max_steps=20, batch_size=2)
        first = train(config, synthetic_manifest, tmp_path / "a")
        second = train(config, synthetic_manifest, tmp_path / "b")
        assert first.loss_trace == pytest.approx(second.loss_trace, abs=1e-6)
        for a, b in zip(first.checkpoint.model.state_dict().values(), second.checkpoint.model.state_dict().values()):
            assert torch.equal(a, b)

    def test_periodic_checkpoints(self, synthetic_manifest, tmp_path):
        train(tiny_config(max_steps=4, batch_size=2, checkpoint_every=2), synthetic_manifest, tmp_path)
        assert (tmp_path / "checkpoint-step2" / "model.pt").is_file()
        assert (tmp_path / "checkpoint-step4" / "model.pt").is_file()

    def test_non_finite_loss_aborts(self, config, synthetic_manifest, tmp_path, monkeypatch):
        def poisoned(pred, gt):
            nan = (pred * float("nan")).mean()
            return LossBreakdown(bce=nan, dice=nan, total=nan)

        monkeypatch.setattr(trainer, "total_loss", poisoned)
        with pytest.raises(NumericAbortError) as info:
            train(config, synthetic_manifest, tmp_path)
        assert info.value.batch_index == 0
        assert info.value.dump_path.is_file()
        assert info.value.exit_code == 4


class TestCheckpoints:
    def test_reload_matches(self, trained):
        checkpoint = load_checkpoint(trained.checkpoint.path, expected_config=trained.checkpoint.config)
        assert checkpoint.config_hash == trained.checkpoint.config_hash
        assert checkpoint.step == 10
        assert len(checkpoint.loss_tail) == 10
        for a, b in zip(checkpoint.model.state_dict().values(), trained.checkpoint.model.state_dict().values()):
            assert torch.equal(a, b)

    def test_missing_file(self, trained, tmp_path):
        path = copy_checkpoint(trained, tmp_path)
        (path / "manifest.txt").unlink()
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_corrupted_parameters(self, trained, tmp_path):
        path = copy_checkpoint(trained, tmp_path)
        (path / "model.pt").write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_edited_config(self, trained, tmp_path):
        path = copy_checkpoint(trained, tmp_path)
        text = (path / "config.txt").read_text(encoding="utf-8")
        (path / "config.txt").write_text(text.replace("seed = 0", "seed = 1"), encoding="utf-8")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_unexpected_config(self, trained):
        with pytest.raises(CheckpointError):
            load_checkpoint(trained.checkpoint.path, expected_config=tiny_config(max_steps=10, seed=5))

    def test_environment_seed_is_ignored_on_reload(self, trained, monkeypatch):
        monkeypatch.setenv("DAG_SEED", "77")
        assert load_checkpoint(trained.checkpoint.path).config.seed == 0


class TestInference:
    def test_mask_file_has_one_line_per_point(self, trained, synthetic_manifest, tmp_path):
        sample = load_dataset(synthetic_manifest)[0]
        values = infer(trained.checkpoint, sample, tmp_path / "mask.txt")
        lines = (tmp_path / "mask.txt").read_text(encoding="utf-8").splitlines()
        assert len(lines) == sample.n_points == values.shape[0]
        assert all(0.0 <= float(line) <= 1.0 for line in lines)

    def test_cropped_cloud(self, trained, synthetic_manifest):
        sample = crop_front_hemisphere(load_dataset(synthetic_manifest)[0])
        assert sample.n_points < 128
        values = infer(trained.checkpoint, sample)
        assert values.shape == (sample.n_points,)
        assert torch.all((values >= 0) & (values <= 1))

    def test_stressed_inference(self, trained, synthetic_manifest, tmp_path):
        sample = load_dataset(synthetic_manifest)[0]
        stress = StressOptions(crop_front=True, jitter_sigma=0.02, seed=1)
        values = infer(trained.checkpoint, sample, tmp_path / "mask.txt", stress)
        assert values.shape == (crop_front_hemisphere(sample).n_points,)
        assert torch.all((values >= 0) & (values <= 1))
        assert torch.equal(values, infer(trained.checkpoint, sample, stress=stress))

    def test_too_few_points(self, trained, synthetic_manifest):
        sample = load_dataset(synthetic_manifest)[0]
        tiny = sample.with_points(sample.points[:10], sample.labels[:10])
        with pytest.raises(PointCountError):
            infer(trained.checkpoint, tiny)

    def test_attention_export(self, trained, synthetic_manifest, tmp_path):
        image_path = synthetic_manifest.entries[0].image_path
        heatmap = export_attention(trained.checkpoint, image_path, "grasp the mug", 2, 1, tmp_path / "attn.txt")
        assert heatmap.token == "mug"
        assert (tmp_path / "attn.txt").is_file()
        assert (tmp_path / "attn.png").is_file()


class TestEvaluation:
    def test_report(self, trained, synthetic_manifest):
        report = evaluate(trained.checkpoint, synthetic_manifest)
        assert report.n_samples == 4
        assert report.split == "seen"
        assert 0 <= report.miou <= 1 and 0 <= report.sim <= 1 and report.mae >= 0

    def test_by_category(self, trained, synthetic_manifest):
        reports = evaluate_by_category(trained.checkpoint, synthetic_manifest)
        assert set(reports) == {entry.category for entry in synthetic_manifest.entries}
        assert sum(report.n_samples for report in reports.values()) == 4

    def test_stressed_report(self, trained, synthetic_manifest):
        stress = StressOptions(crop_front=True, jitter_sigma=0.02)
        report = evaluate(trained.checkpoint, synthetic_manifest, stress)
        assert report.n_samples == 4
        assert 0 <= report.miou <= 1 and 0 <= report.sim <= 1 and report.mae >= 0
        assert evaluate(trained.checkpoint, synthetic_manifest, stress) == report
        reports = evaluate_by_category(trained.checkpoint, synthetic_manifest, stress)
        assert sum(category.n_samples for category in reports.values()) == 4


class TestSynthetic:
    def test_count_must_be_positive(self, tmp_path):
        with pytest.raises(DatasetError):
            make_synthetic(SyntheticConfig(n_points=64), 0, tmp_path)

    def test_written_samples_reload(self, tmp_path):
        config = SyntheticConfig(n_points=64, image_size=16, seed=2)
        manifest = load_manifest(make_synthetic(config, 3, tmp_path))
        expected = generate_synthetic(config, 3)
        for loaded, original in zip(load_dataset(manifest), expected):
            assert torch.allclose(loaded.points, original.points, atol=1e-6)
            assert torch.allclose(loaded.labels, original.labels, atol=1e-6)
            assert loaded.text == original.text

    def test_reruns_are_byte_identical(self, tmp_path):
        config = SyntheticConfig(n_points=64, image_size=16, seed=2)
        first, second = make_synthetic(config, 2, tmp_path / "a"), make_synthetic(config, 2, tmp_path / "b")
        for name in ("manifest.tsv", "sample_000.txt", "sample_001.png"):
            assert (first.parent / name).read_bytes() == (second.parent / name).read_bytes()


@pytest.mark.slow
def test_overfits_a_small_synthetic_set(tmp_path):
    manifest = load_manifest(make_synthetic(SyntheticConfig(n_points=512, image_size=64, seed=0), 8, tmp_path / "data"))
    config = tiny_config(
        d=64, d_txt=32, d_img=32, d_p=64, pyramid_channels=[8, 16, 32], level_sizes=[512, 128],
        point_channels=[64, 128], radii=[0.2, 0.4], nsample=32, pooling_m=4, prompt_count=8, caption_tokens=4,
        image_size=64, batch_size=8, learning_rate=1e-3, max_steps=500, miou_mode="single",
    )
    result = train(config, manifest, tmp_path / "run")
    report = evaluate(result.checkpoint, manifest)
    fresh = evaluate_model(DAGModel(config).eval(), manifest)

    assert result.loss_trace[-1] < result.loss_trace[0]
    assert report.miou >= 0.85
    assert report.miou > fresh.miou
    assert result.frozen_checksums_before == result.frozen_checksums_after


@pytest.mark.slow
@pytest.mark.parametrize("overrides", [
    [],
    ["affordance_block=false"],
    ["cls_token=false"],
    ["affordance_block=false", "cls_token=false"],
    ["captioner=empty"],
    ["captioner=verb"],
])
def test_ablation_variants_train_and_evaluate(overrides, synthetic_manifest, tmp_path):
    result = ablate(tiny_config(max_steps=50), overrides, synthetic_manifest, tmp_path, seeds=[0, 1])
    assert set(result.summary.per_seed) == {0, 1}
    assert result.trainable_parameters == DAGModel(result.config).trainable_parameter_count()
    if overrides:
        assert result.trainable_parameters < DAGModel(tiny_config()).trainable_parameter_count()
    assert (tmp_path / "seed-1" / "checkpoint" / "model.pt").is_file()
