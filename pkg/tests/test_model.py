import pytest
import numpy as np

from crowdcount.backbone import BackboneConfig
from crowdcount.errors import ConfigError
from crowdcount.gradcheck import tiny_model_config
from crowdcount.heads import HeadsConfig
from crowdcount.losses import LossWeights, SinkhornConfig, density_loss
from crowdcount.model import ABLATIONS, CrowdCounter, ModelConfig
from crowdcount.synth import SceneConfig, generate_samples
from crowdcount.tokenizer import TokenizerConfig


@pytest.fixture
def image(rng):
    return rng.uniform(size=(3, 32, 32))


class TestModelConfig:
    def test_tiny_geometry(self):
        cfg = tiny_model_config()
        assert cfg.token_grid == (2, 2)
        assert cfg.token_stride == 16
        assert cfg.output_grid == (8, 8)

    def test_default_geometry(self):
        cfg = ModelConfig()
        assert cfg.token_grid == (4, 4)
        assert cfg.output_grid == (16, 16)

    def test_width_mismatch(self):
        with pytest.raises(ConfigError):
            ModelConfig(tokenizer=TokenizerConfig(final_dim=32))

    def test_image_must_tile(self):
        with pytest.raises(ConfigError):
            ModelConfig(image_h=60)

    def test_output_stride_must_fit(self):
        with pytest.raises(ConfigError):
            ModelConfig(heads=HeadsConfig(output_stride=3))

    @pytest.mark.parametrize("name", sorted(ABLATIONS))
    def test_ablations(self, name):
        heads = ModelConfig().with_ablation(name).heads
        assert (heads.tam, heads.rtm) == ABLATIONS[name]

    def test_unknown_ablation(self):
        with pytest.raises(ConfigError, match="tam\\+rtm"):
            ModelConfig().with_ablation("rtm-only")


class TestCrowdCounter:
    def test_parameter_prefixes(self):
        names = CrowdCounter(tiny_model_config()).parameter_names()
        prefixes = {n.split(".")[0] for n in names}
        assert prefixes == {"tokenizer", "backbone", "tam", "rtm", "decoder", "aux1"}
        assert "aux1.out.weight" in names
        assert len(names) == len(set(names))

    def test_aux_decoders_are_named_by_layer(self):
        cfg = ModelConfig(tokenizer=TokenizerConfig(reduction_dim=4, final_dim=8),
                          backbone=BackboneConfig(d=8, layers=4, heads=2),
                          heads=HeadsConfig(reduction=2, decoder_width=4), image_h=32, image_w=32)
        names = CrowdCounter(cfg).parameter_names()
        assert {n.split(".")[0] for n in names if n.startswith("aux")} == {"aux1", "aux2", "aux3"}

    def test_ablations_only_change_head_parameters(self):
        full = set(CrowdCounter(tiny_model_config(True, True)).parameter_names())
        tam_only = set(CrowdCounter(tiny_model_config(True, False)).parameter_names())
        baseline = set(CrowdCounter(tiny_model_config(False, False)).parameter_names())
        assert baseline < tam_only < full
        assert all(n.startswith("tam.") for n in tam_only - baseline)
        assert all(n.startswith("rtm.") for n in full - tam_only)

    def test_outputs(self, image):
        prediction = CrowdCounter(tiny_model_config())(image)
        assert prediction.density.grid.shape == (8, 8)
        assert np.all(prediction.density.grid.data >= 0)
        assert prediction.count.shape == ()
        assert [m.grid.shape for m in prediction.aux] == [(8, 8)]
        assert prediction.gate.shape == (8,)

    def test_inference_skips_training_outputs(self, image):
        prediction = CrowdCounter(tiny_model_config())(image, with_aux=False)
        assert prediction.count is None
        assert prediction.aux == []

    def test_baseline_has_no_gate_or_count(self, image):
        prediction = CrowdCounter(tiny_model_config(False, False))(image)
        assert prediction.gate is None
        assert prediction.count is None

    def test_same_seed_same_prediction(self, image):
        cfg = tiny_model_config()
        a = CrowdCounter(cfg, seed=4)(image).density.grid.data
        b = CrowdCounter(cfg, seed=4)(image).density.grid.data
        c = CrowdCounter(cfg, seed=5)(image).density.grid.data
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_zero_parameters_count_nothing(self, image):
        model = CrowdCounter(tiny_model_config())
        for p in model.parameters():
            p.data[...] = 0.0
        assert model.count(image) == 0.0

    def test_count_is_the_density_sum(self, image):
        model = CrowdCounter(tiny_model_config())
        assert model.count(image) == pytest.approx(float(model(image).density.grid.data.sum()))

    def test_no_taps_no_aux_decoders(self, image):
        cfg = ModelConfig(tokenizer=TokenizerConfig(reduction_dim=4, final_dim=8),
                          backbone=BackboneConfig(d=8, layers=1, heads=2),
                          heads=HeadsConfig(decoder_width=4), image_h=32, image_w=32)
        model = CrowdCounter(cfg)
        assert not any(n.startswith("aux") for n in model.parameter_names())
        assert model(image).aux == []

    @pytest.mark.parametrize("bypass", [False, True])
    def test_context_token_reaches_the_density_through_tam(self, bypass):
        # without encoder layers the context token can only act through the gate
        cfg = ModelConfig(tokenizer=TokenizerConfig(reduction_dim=4, final_dim=8),
                          backbone=BackboneConfig(d=8, layers=0, heads=2),
                          heads=HeadsConfig(reduction=2, decoder_width=4), image_h=32, image_w=32)
        sample = generate_samples(3, 1, SceneConfig(image_h=32, image_w=32, count_range=(4, 8)), 4)[0]
        model = CrowdCounter(cfg, seed=1)
        prediction = model(sample.image, with_aux=False, bypass_tam=bypass)
        loss, _ = density_loss(prediction.density.grid, sample.gt, LossWeights(),
                               SinkhornConfig(epsilon=0.1, max_iters=20, tol=0.0))
        loss.backward()
        grad = model.backbone.context_token.grad
        if bypass:
            assert grad is None or not np.any(grad)
        else:
            assert np.abs(grad).max() > 0
