import pytest
import numpy as np

from crowdcount.errors import ConfigError, ContractError
from crowdcount.synth import (AugmentConfig, CrowdSample, Person, Scene, SceneConfig, augment, bin_dots,
                              build_sample, generate_samples, generate_scene, render, scene_seeds)


class TestScenes:
    def test_same_seed_same_scene(self):
        a, b = generate_scene(42), generate_scene(42)
        assert a == b
        assert np.array_equal(render(a), render(b))

    @pytest.mark.parametrize("count", [0, 50])
    def test_fixed_count_range(self, count):
        scene = generate_scene(1, count_range=(count, count))
        assert len(scene.persons) == count
        assert scene.dots.shape == (count, 2)

    def test_sizes_shrink_with_height(self):
        scene = generate_scene(5, count_range=(40, 40), size_gradient=0.5)
        by_y = sorted(scene.persons, key=lambda p: p.y)
        assert by_y[0].size >= by_y[-1].size
        assert all(2.0 - 1e-12 <= p.size <= 4.0 for p in scene.persons)

    def test_person_must_be_inside(self):
        with pytest.raises(ContractError):
            Scene((Person(64, 3, 4.0),), 64, 64, 0)

    @pytest.mark.parametrize("kwargs", [{"count_range": (5, 2)}, {"count_range": (-1, 3)},
                                        {"size_gradient": 1.0}])
    def test_scene_config_validation(self, kwargs):
        with pytest.raises(ConfigError):
            SceneConfig(**kwargs)


class TestRender:
    def test_single_person_peaks_at_the_head(self):
        image = render(Scene((Person(32, 32, 4.0),), 64, 64, 3))
        y, x = np.unravel_index(np.argmax(image.sum(axis=0)), (64, 64))
        assert abs(int(y) - 32) <= 1
        assert abs(int(x) - 32) <= 1

    def test_values_are_eight_bit_levels(self):
        image = render(generate_scene(9))
        assert image.shape == (3, 64, 64)
        assert image.min() >= 0.0 and image.max() <= 1.0
        assert np.allclose(image * 255, np.round(image * 255))


class TestBinDots:
    def test_hand_case(self):
        gt = bin_dots(np.array([[0, 0], [3, 3], [4, 0], [7, 7]]), 8, 8, 4)
        assert gt.grid.tolist() == [[2, 1], [0, 1]]
        assert gt.cell_size == 4

    def test_partial_cells_round_up(self):
        assert bin_dots(np.array([[9, 9]]), 10, 10, 4).grid.shape == (3, 3)

    @pytest.mark.parametrize("stride", [1, 2, 3, 4, 8, 16])
    def test_total_is_preserved(self, rng, stride):
        dots = np.column_stack([rng.integers(0, 48, 30), rng.integers(0, 32, 30)])
        assert bin_dots(dots, 32, 48, stride).total == 30

    def test_no_dots(self):
        gt = bin_dots(np.zeros((0, 2)), 16, 16, 4)
        assert gt.total == 0
        assert gt.shape == (4, 4)

    def test_dot_outside(self):
        with pytest.raises(ContractError):
            bin_dots(np.array([[16, 0]]), 16, 16, 4)

    def test_stride_must_be_positive(self):
        with pytest.raises(ContractError):
            bin_dots(np.zeros((0, 2)), 16, 16, 0)


@pytest.fixture
def sample():
    return build_sample(generate_scene(4, count_range=(20, 20)), 4, "0000")


class TestAugment:
    def test_full_crop_without_flip_is_identity(self, sample, rng):
        out = augment(sample, AugmentConfig(64, 64, 0.0), rng)
        assert np.array_equal(out.image, sample.image)
        assert np.array_equal(out.dots, sample.dots)
        assert np.array_equal(out.gt.grid, sample.gt.grid)

    def test_double_flip_restores_the_sample(self, sample, rng):
        flip = AugmentConfig(64, 64, 1.0)
        twice = augment(augment(sample, flip, rng), flip, rng)
        assert np.array_equal(twice.image, sample.image)
        assert np.array_equal(twice.dots, sample.dots)

    @pytest.mark.parametrize("seed", range(5))
    def test_crop_recounts_surviving_dots(self, sample, seed):
        out = augment(sample, AugmentConfig(32, 40, 0.5), np.random.default_rng(seed))
        assert out.image.shape == (3, 32, 40)
        assert out.gt.total == out.count
        assert out.gt.shape == (8, 10)
        assert np.all((out.dots[:, 0] < 40) & (out.dots[:, 1] < 32))

    def test_crops_of_a_larger_scene_move(self, rng):
        scene = generate_scene(9, count_range=(30, 30), image_h=80, image_w=80)
        sample = build_sample(scene, 4, "0000")
        crops = [augment(sample, AugmentConfig(64, 64, 0.0), rng) for _ in range(5)]
        assert all(c.image.shape == (3, 64, 64) for c in crops)
        assert len({c.image.tobytes() for c in crops}) > 1
        assert all(c.gt.total == c.count for c in crops)

    def test_crop_larger_than_image(self, sample, rng):
        with pytest.raises(ContractError):
            augment(sample, AugmentConfig(65, 64), rng)

    @pytest.mark.parametrize("kwargs", [{"crop_h": 0}, {"hflip_prob": 1.5}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ConfigError):
            AugmentConfig(**kwargs)


class TestSampleStreams:
    def test_generation_is_deterministic(self):
        cfg = SceneConfig(image_h=32, image_w=32)
        a, b = generate_samples(3, 4, cfg, 4), generate_samples(3, 4, cfg, 4)
        assert [s.sample_id for s in a] == ["0000", "0001", "0002", "0003"]
        for x, y in zip(a, b):
            assert np.array_equal(x.image, y.image)
            assert np.array_equal(x.dots, y.dots)

    def test_streams_are_independent(self):
        assert set(scene_seeds(3, 20, 0)).isdisjoint(scene_seeds(3, 20, 1))
        assert scene_seeds(3, 5, 0) == scene_seeds(3, 5, 0)
        assert scene_seeds(3, 0) == []

    def test_ground_truth_matches_dots(self):
        for s in generate_samples(8, 3, SceneConfig(), 4, start_index=10):
            assert isinstance(s, CrowdSample)
            assert s.gt.total == s.count
            assert s.sample_id.startswith("001")
