import numpy as np
import pytest
import torch

from dag.data import (
    AffordanceSample,
    StressOptions,
    SyntheticConfig,
    crop_front_hemisphere,
    generate_synthetic,
    jitter_points,
    load_manifest,
    load_sample,
    normalize_points,
    save_image,
    write_manifest,
    write_sample,
)
from dag.errors import (
    DatasetError,
    DegenerateCloudError,
    MissingFileError,
    ParseError,
    SampleValidationError,
    StructureError,
)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def image_path(tmp_path):
    path = tmp_path / "image.png"
    save_image(torch.full((3, 16, 16), 0.5), path)
    return path


def test_load_sample_keeps_every_line(tmp_path, image_path):
    rng = np.random.default_rng(0)
    records = np.concatenate([rng.normal(size=(2048, 3)), rng.uniform(size=(2048, 1))], axis=1)
    points_path = write_lines(tmp_path / "cloud.txt", [" ".join(f"{v:.6f}" for v in row) for row in records])

    sample = load_sample(points_path, image_path, "grasp", "grasp")

    assert sample.n_points == 2048
    assert sample.labels.shape == (2048,)
    assert sample.image.shape == (3, 16, 16)


def test_label_out_of_range_is_rejected(tmp_path, image_path):
    points_path = write_lines(tmp_path / "cloud.txt", ["0 0 0 0.5", "0 0 0 1.2"])
    with pytest.raises(SampleValidationError, match=":2:"):
        load_sample(points_path, image_path, "grasp", "grasp")


def test_malformed_line_reports_line_number(tmp_path, image_path):
    points_path = write_lines(tmp_path / "cloud.txt", ["0 0 0 1", "", "0 0 x 1"])
    with pytest.raises(ParseError) as excinfo:
        load_sample(points_path, image_path, "grasp", "grasp")
    assert excinfo.value.line_number == 3


@pytest.mark.parametrize("lines", [["0 0 0"], []])
def test_structural_problems(tmp_path, image_path, lines):
    points_path = tmp_path / "cloud.txt"
    points_path.write_text("\n".join(lines), encoding="utf-8")
    with pytest.raises(StructureError):
        load_sample(points_path, image_path, "grasp", "grasp")


def test_missing_image(tmp_path):
    points_path = write_lines(tmp_path / "cloud.txt", ["0 0 0 1"])
    with pytest.raises(MissingFileError):
        load_sample(points_path, tmp_path / "nope.png", "grasp", "grasp")


def test_loading_twice_is_identical(tmp_path, image_path):
    points_path = write_lines(tmp_path / "cloud.txt", ["0.1 0.2 0.3 0.4", "1 2 3 1"])
    first = load_sample(points_path, image_path, "grasp", "grasp")
    second = load_sample(points_path, image_path, "grasp", "grasp")
    assert torch.equal(first.points, second.points)
    assert torch.equal(first.labels, second.labels)
    assert torch.equal(first.image, second.image)


def test_sample_validation():
    with pytest.raises(StructureError):
        AffordanceSample(torch.zeros(4, 3), torch.zeros(3), torch.zeros(3, 8, 8), "t", "c")
    with pytest.raises(SampleValidationError):
        AffordanceSample(torch.full((2, 3), float("nan")), torch.zeros(2), torch.zeros(3, 8, 8), "t", "c")


def test_write_then_load_round_trip(tmp_path):
    sample = generate_synthetic(SyntheticConfig(n_points=64, image_size=16), 1)[0]
    write_sample(sample, tmp_path / "s.txt", tmp_path / "s.png")

    reloaded = load_sample(tmp_path / "s.txt", tmp_path / "s.png", sample.text, sample.category)

    assert torch.allclose(reloaded.points, sample.points, atol=1e-6)
    assert torch.allclose(reloaded.labels, sample.labels, atol=1e-6)
    assert torch.allclose(reloaded.image, sample.image, atol=1.0 / 255)


def test_normalize_identity_case():
    points = torch.tensor([[1.0, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]])
    assert torch.allclose(normalize_points(points), points, atol=1e-6)


def test_normalize_degenerate_cloud():
    with pytest.raises(DegenerateCloudError):
        normalize_points(torch.tensor([[0.3, 0.2, 0.1]] * 10))


def test_normalize_random_cloud():
    points = torch.rand(100, 3, dtype=torch.float64) * 5 + 2
    normalized = normalize_points(points)
    assert normalized.mean(dim=0).norm() <= 1e-6
    assert abs(normalized.norm(dim=1).max().item() - 1.0) <= 1e-6


def test_synthetic_is_deterministic():
    config = SyntheticConfig(n_points=256, image_size=16, seed=11)
    first, second = generate_synthetic(config, 3), generate_synthetic(config, 3)
    for a, b in zip(first, second):
        assert torch.equal(a.points, b.points)
        assert torch.equal(a.labels, b.labels)
        assert torch.equal(a.image, b.image)
        assert a.text == b.text


def test_synthetic_seed_point_has_label_one():
    for sample in generate_synthetic(SyntheticConfig(n_points=256, image_size=16), 4):
        assert sample.labels.max().item() == 1.0


def test_synthetic_labels_fall_off_with_distance():
    sample = generate_synthetic(SyntheticConfig(n_points=512, image_size=16, seed=5), 1)[0]
    seed_point = sample.points[sample.labels.argmax()]
    distance = (sample.points - seed_point).norm(dim=1)
    order = distance.argsort()
    labels = sample.labels[order]
    assert torch.all(labels[1:] <= labels[:-1] + 1e-6)


def test_synthetic_sphere_region_matches_cap_area():
    config = SyntheticConfig(shape_kind="sphere", n_points=20000, region_radius=0.5, image_size=8, seed=2)
    sample = generate_synthetic(config, 1)[0]
    fraction = (sample.labels > 0.5).float().mean().item()

    # independent Monte-Carlo estimate with the seed moved to the pole
    sigma = config.region_radius / 2
    cutoff = np.sqrt(2 * sigma ** 2 * np.log(2))
    rng = np.random.default_rng(123)
    directions = rng.standard_normal((10 ** 6, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    oracle = np.mean(np.linalg.norm(directions - np.array([0, 0, 1.0]), axis=1) < cutoff)

    assert abs(fraction - oracle) <= 0.05


@pytest.mark.parametrize("kind", ["sphere", "box", "cylinder"])
def test_synthetic_images_stay_in_unit_range(kind):
    sample = generate_synthetic(SyntheticConfig(shape_kind=kind, n_points=64, region_radius=0.4, image_size=16), 1)[0]
    assert sample.image.min() >= 0 and sample.image.max() <= 1
    assert sample.image.shape == (3, 16, 16)


def test_synthetic_rejects_bad_requests():
    with pytest.raises(DatasetError):
        generate_synthetic(SyntheticConfig(), 0)
    with pytest.raises(ValueError):
        SyntheticConfig(shape_kind="box", region_radius=2.0)


def test_crop_front_hemisphere_keeps_alignment():
    sample = generate_synthetic(SyntheticConfig(n_points=256, image_size=16), 1)[0]
    cropped = crop_front_hemisphere(sample)
    assert 0 < cropped.n_points < sample.n_points
    assert torch.all(cropped.points[:, 2] <= 0)
    keep = sample.points[:, 2] <= 0
    assert torch.equal(cropped.labels, sample.labels[keep])


def test_jitter_is_seeded():
    points = torch.zeros(10, 3)
    assert torch.equal(jitter_points(points, 0.01, seed=1), jitter_points(points, 0.01, seed=1))
    assert not torch.equal(jitter_points(points, 0.01, seed=1), points)


def test_manifest_round_trip(synthetic_manifest_path, tmp_path):
    manifest = load_manifest(synthetic_manifest_path)
    assert manifest.split == "seen"
    assert len(manifest.entries) == 4

    copy = synthetic_manifest_path.parent / "copy.tsv"
    write_manifest(manifest, copy)
    assert load_manifest(copy) == manifest


def test_manifest_errors(tmp_path):
    bad_header = write_lines(tmp_path / "a.tsv", ["seen"])
    with pytest.raises(ParseError):
        load_manifest(bad_header)
    missing = write_lines(tmp_path / "b.tsv", ["split=seen", "x.txt\ty.png\tgrasp\tgrasp"])
    with pytest.raises(MissingFileError):
        load_manifest(missing)
    short = write_lines(tmp_path / "c.tsv", ["split=unseen", "x.txt\ty.png"])
    with pytest.raises(ParseError):
        load_manifest(short)


class TestStressOptions:
    @pytest.fixture
    def sample(self):
        return generate_synthetic(SyntheticConfig(n_points=256, image_size=16), 1)[0]

    def test_inactive_options_leave_the_sample_alone(self, sample):
        options = StressOptions()
        assert not options.active
        assert options.apply(sample) is sample

    def test_crop_then_jitter(self, sample):
        options = StressOptions(crop_front=True, jitter_sigma=0.01, seed=4)
        stressed = options.apply(sample)
        cropped = crop_front_hemisphere(sample)
        assert options.active
        assert stressed.n_points == cropped.n_points
        assert torch.equal(stressed.labels, cropped.labels)
        assert torch.equal(stressed.points, jitter_points(cropped.points, 0.01, seed=4))

    def test_sample_index_offsets_the_seed(self, sample):
        options = StressOptions(jitter_sigma=0.01, seed=4)
        assert torch.equal(options.apply(sample, 0).points, options.apply(sample, 0).points)
        assert not torch.equal(options.apply(sample, 0).points, options.apply(sample, 1).points)
        assert torch.equal(options.apply(sample, 1).points, jitter_points(sample.points, 0.01, seed=5))

    def test_crop_that_leaves_nothing(self, sample):
        back = sample.with_points(sample.points.abs() + 0.1)
        with pytest.raises(DegenerateCloudError):
            StressOptions(crop_front=True).apply(back)

    def test_negative_sigma_is_rejected(self):
        with pytest.raises(ValueError):
            StressOptions(jitter_sigma=-0.1)
