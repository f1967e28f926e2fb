import pytest
import numpy as np

from numpy.testing import assert_allclose

from crowdcount.errors import ConfigError, ShapeError
from crowdcount.tensor import Tensor
from crowdcount.tokenizer import (DEFAULT_STAGES, ReductionLayer, SplitSpec, TokenGrid, Tokenizer,
                                  TokenizerConfig, overlapping_split)


def brute_force_length(h, w, specs):
    for spec in specs:
        h = len(range(0, h + 2 * spec.p - spec.k + 1, spec.s))
        w = len(range(0, w + 2 * spec.p - spec.k + 1, spec.s))
        if h == 0 or w == 0:
            return None
    return h * w


def test_sequence_length_matches_window_enumeration():
    rng = np.random.default_rng(11)
    checked = 0
    for _ in range(200):
        specs = []
        for _ in range(3):
            k = int(rng.integers(2, 8))
            specs.append(SplitSpec(k, int(rng.integers(1, k)), int(rng.integers(0, k // 2 + 1))))
        h, w = (int(v) for v in rng.integers(4, 80, size=2))
        cfg = TokenizerConfig(stage_specs=tuple(specs))
        expected = brute_force_length(h, w, specs)
        if expected is None:
            with pytest.raises(ShapeError):
                cfg.sequence_length(h, w)
        else:
            assert cfg.sequence_length(h, w) == expected
            checked += 1
    assert checked


@pytest.mark.parametrize("size, grids, n", [
    (64, [(16, 16), (8, 8), (4, 4)], 16),
    (32, [(8, 8), (4, 4), (2, 2)], 4),
])
def test_default_stages(size, grids, n):
    cfg = TokenizerConfig()
    assert cfg.stage_specs == DEFAULT_STAGES
    assert cfg.grids(size, size) == grids
    assert cfg.sequence_length(size, size) == n
    assert cfg.stride(size, size) == 16


class TestConfigErrors:
    @pytest.mark.parametrize("k, s, p", [(3, 3, 1), (3, 4, 0), (0, 1, 0), (3, 2, -1)])
    def test_invalid_split(self, k, s, p):
        with pytest.raises(ConfigError):
            SplitSpec(k, s, p)

    def test_wrong_stage_count(self):
        with pytest.raises(ConfigError):
            TokenizerConfig(stage_specs=DEFAULT_STAGES[:2])

    def test_collapsed_grid_names_the_stage(self):
        cfg = TokenizerConfig(stage_specs=(SplitSpec(5, 2, 0), SplitSpec(3, 2, 1), SplitSpec(3, 2, 1)))
        with pytest.raises(ShapeError, match="stage 0"):
            cfg.grids(3, 3)


def test_overlapping_split_grid(rng):
    grid = overlapping_split(Tensor(rng.normal(size=(3, 64, 64))), SplitSpec(7, 4, 3))
    assert (grid.grid_h, grid.grid_w) == (16, 16)
    assert grid.tokens.shape == (256, 147)
    assert grid.to_image().shape == (147, 16, 16)


def test_token_grid_rejects_mismatched_tokens():
    with pytest.raises(ShapeError):
        TokenGrid(Tensor(np.zeros((5, 2))), 2, 2)


class TestTokenizer:
    def test_forward_shape(self, rng):
        tokenizer = Tokenizer(TokenizerConfig(reduction_dim=4, final_dim=8), np.random.default_rng(0))
        out = tokenizer(Tensor(rng.uniform(size=(3, 32, 32))))
        assert (out.grid_h, out.grid_w) == (2, 2)
        assert out.tokens.shape == (4, 8)

    def test_same_seed_same_tokens(self, rng):
        image = Tensor(rng.uniform(size=(3, 32, 32)))
        cfg = TokenizerConfig(reduction_dim=4, final_dim=8)
        a = Tokenizer(cfg, np.random.default_rng(5))(image).tokens.data
        b = Tokenizer(cfg, np.random.default_rng(5))(image).tokens.data
        assert np.array_equal(a, b)

    def test_wrong_channel_count(self, rng):
        tokenizer = Tokenizer(TokenizerConfig(reduction_dim=4, final_dim=8), rng)
        with pytest.raises(ShapeError):
            tokenizer(Tensor(np.zeros((1, 32, 32))))


class TestReductionLayer:
    def test_identical_tokens_stay_identical(self, rng):
        layer = ReductionLayer(6, 4, np.random.default_rng(0))
        out = layer(TokenGrid(Tensor(np.tile(rng.normal(size=6), (4, 1))), 2, 2))
        assert out.tokens.shape == (4, 4)
        assert_allclose(out.tokens.data, np.tile(out.tokens.data[0], (4, 1)), atol=1e-12)

    def test_single_token_attends_to_itself(self, rng):
        layer = ReductionLayer(6, 4, np.random.default_rng(0))
        _, weights, _ = layer.attn.attend(layer.norm1(Tensor(rng.normal(size=(1, 6)))))
        assert weights.data.tolist() == [[[1.0]]]

    def test_input_width_is_checked(self, rng):
        layer = ReductionLayer(6, 4, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            layer(TokenGrid(Tensor(rng.normal(size=(4, 5))), 2, 2))


def test_larger_images_give_longer_sequences():
    assert TokenizerConfig().sequence_length(128, 128) == 64


def test_zero_image_yields_the_projection_bias():
    tokenizer = Tokenizer(TokenizerConfig(reduction_dim=4, final_dim=8), np.random.default_rng(0))
    tokenizer.project.bias.data[:] = 0.3
    out = tokenizer(Tensor(np.zeros((3, 32, 32))))
    assert np.array_equal(out.tokens.data, np.full((4, 8), 0.3))


def test_channel_permutation_permutes_token_blocks(rng):
    x = rng.normal(size=(3, 12, 12))
    perm = [2, 0, 1]
    spec = SplitSpec(3, 2, 1)
    plain = overlapping_split(Tensor(x), spec).tokens.data.reshape(-1, 3, 9)
    permuted = overlapping_split(Tensor(x[perm]), spec).tokens.data.reshape(-1, 3, 9)
    assert np.array_equal(permuted, plain[:, perm])
