import pytest

from unittest.mock import MagicMock

from crowdcount.errors import ConfigError
from crowdcount.setup import (DEFAULTS, build_run_config, load_config, load_run_config, parse_config_text,
                              parse_overrides, preset_defaults, render_config_file, setup_wizard)


class TestRunConfig:
    @pytest.mark.parametrize("preset", ["desk", "full"])
    def test_flat_round_trip(self, preset):
        flat = preset_defaults(preset)
        assert build_run_config(flat).to_flat() == flat

    def test_desk_defaults(self):
        cfg = build_run_config(preset_defaults("desk"))
        assert cfg.model.backbone.taps == (1, 2, 3)
        assert cfg.model.output_grid == (16, 16)
        assert cfg.optim.lr == 2e-4
        assert cfg.model.heads.final_bias == 0.1
        assert (cfg.scene.image_h, cfg.scene.image_w) == (80, 80)
        assert (cfg.augment.crop_h, cfg.augment.crop_w) == (64, 64)
        assert (cfg.epochs, cfg.batch_size, cfg.checkpoint_every) == (100, 4, 10)
        assert cfg.sinkhorn.epsilon == 0.01

    def test_full_preset(self):
        cfg = build_run_config(preset_defaults("full"))
        assert (cfg.model.backbone.d, cfg.model.backbone.layers, cfg.model.backbone.heads) == (384, 14, 6)
        assert cfg.model.backbone.taps == (5, 8, 11)
        assert cfg.optim.lr == 1e-5

    def test_with_overrides(self, tiny_cfg):
        changed = tiny_cfg.with_overrides(LAMBDA_RTM=0.5, TAM="false")
        assert changed.losses.rtm == 0.5
        assert not changed.model.heads.tam
        assert changed.model.backbone == tiny_cfg.model.backbone
        assert changed.seed == tiny_cfg.seed

    def test_explicit_no_taps(self, tiny_flat):
        cfg = build_run_config({**tiny_flat, "TAP_LAYERS": "none"})
        assert cfg.model.backbone.taps == ()
        assert cfg.to_flat()["TAP_LAYERS"] == "none"

    @pytest.mark.parametrize("key, value, match", [
        ("LAYERS", "four", "LAYERS"),
        ("TAM", "maybe", "TAM"),
        ("STAGE_SPECS", "7,4;3,2,1;3,2,1", "STAGE_SPECS"),
        ("STAGE_SPECS", "7,7,3;3,2,1;3,2,1", "STAGE_SPECS"),
        ("CROP_H", "48", "crop"),
        ("SCENE_H", "24", "does not fit"),
        ("HEADS", "3", "divisible"),
        ("LR", "0", "learning rate"),
        ("BATCH_SIZE", "0", "batch size"),
    ])
    def test_bad_values(self, tiny_flat, key, value, match):
        with pytest.raises(ConfigError, match=match):
            build_run_config({**tiny_flat, key: value})

    def test_missing_key(self, tiny_flat):
        del tiny_flat["SEED"]
        with pytest.raises(ConfigError, match="SEED"):
            build_run_config(tiny_flat)


class TestParsing:
    def test_config_text(self):
        values = parse_config_text("# comment\nLAYERS=6\nRUN_DIR=runs/$HOME\n")
        assert values == {"LAYERS": "6", "RUN_DIR": "runs/$HOME"}

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="LAYRES"):
            parse_config_text("LAYRES=6\n", "my.conf")

    def test_key_without_value(self):
        with pytest.raises(ConfigError, match="LAYERS"):
            parse_config_text("LAYERS\n")

    def test_overrides(self):
        assert parse_overrides(["epochs=3", "LR = 0.01"]) == {"EPOCHS": "3", "LR": "0.01"}
        assert parse_overrides(None) == {}

    @pytest.mark.parametrize("pair", ["EPOCHS", "=3", "BAD=1"])
    def test_bad_overrides(self, pair):
        with pytest.raises(ConfigError):
            parse_overrides([pair])

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="preset"):
            preset_defaults("huge")


@pytest.mark.usefixtures("mock_config_file")
class TestLayering:
    def test_defaults_without_a_file(self):
        assert load_config() == preset_defaults("desk")

    def test_default_file_is_picked_up(self, mock_config_file):
        mock_config_file.write_text("EPOCHS=7\n")
        assert load_config()["EPOCHS"] == "7"

    def test_precedence(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("PRESET=full\nEPOCHS=7\nSEED=1\n")
        flat = load_config(str(path), {"SEED": "2"})
        assert flat["EMBED_DIM"] == "384"
        assert flat["EPOCHS"] == "7"
        assert flat["SEED"] == "2"

    def test_override_selects_the_preset(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("PRESET=full\n")
        assert load_config(str(path), {"PRESET": "desk"})["EMBED_DIM"] == DEFAULTS["EMBED_DIM"]

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(str(tmp_path / "absent.conf"))

    def test_rendered_file_loads_back(self, tmp_path, tiny_cfg):
        path = tmp_path / "run.conf"
        path.write_text(render_config_file(tiny_cfg.to_flat()))
        assert load_run_config(str(path)) == tiny_cfg


@pytest.mark.usefixtures("mock_config_file")
class TestSetupWizard:
    def test_writes_selected_variant(self, mocker, mock_config_file):
        mocker.patch('questionary.select', side_effect=[
            MagicMock(ask=lambda: "desk (4 layers, width 64, trains on a laptop core)"),
            MagicMock(ask=lambda: "tam+rtm"),
        ])
        mocker.patch('questionary.text', return_value=MagicMock(ask=lambda: "0.5"))
        cfg = setup_wizard(str(mock_config_file))
        assert cfg.losses.rtm == 0.5
        assert load_run_config(str(mock_config_file)) == cfg

    def test_baseline_skips_the_weight_prompt(self, mocker, mock_config_file):
        mocker.patch('questionary.select', side_effect=[
            MagicMock(ask=lambda: "full (14 layers, width 384, taps at 5/8/11)"),
            MagicMock(ask=lambda: "baseline"),
        ])
        text = mocker.patch('questionary.text')
        cfg = setup_wizard(str(mock_config_file))
        text.assert_not_called()
        assert (cfg.model.heads.tam, cfg.model.heads.rtm) == (False, False)
        assert cfg.model.backbone.d == 384

    def test_keeps_existing_file(self, mocker, mock_config_file):
        mock_config_file.write_text("EPOCHS=7\n")
        mocker.patch('questionary.confirm', return_value=MagicMock(ask=lambda: False))
        select = mocker.patch('questionary.select')
        assert setup_wizard(str(mock_config_file)) is None
        select.assert_not_called()
        assert mock_config_file.read_text() == "EPOCHS=7\n"

    def test_cancelled_selection(self, mocker, mock_config_file):
        mocker.patch('questionary.select', return_value=MagicMock(ask=lambda: None))
        assert setup_wizard(str(mock_config_file)) is None
        assert not mock_config_file.exists()
