import pytest
import numpy as np

from crowdcount.setup import build_run_config, preset_defaults
from crowdcount.synth import generate_samples

# A 32x32 model with 8-wide tokens: every forward pass takes milliseconds.
TINY = {
    "IMAGE_H": "32",
    "IMAGE_W": "32",
    "CROP_H": "32",
    "CROP_W": "32",
    "SCENE_H": "32",
    "SCENE_W": "32",
    "REDUCTION_DIM": "4",
    "EMBED_DIM": "8",
    "LAYERS": "2",
    "HEADS": "2",
    "TAP_LAYERS": "1",
    "TAM_REDUCTION": "2",
    "DECODER_WIDTH": "4",
    "SINKHORN_ITERS": "20",
    "COUNT_MIN": "2",
    "COUNT_MAX": "6",
    "EPOCHS": "1",
    "BATCH_SIZE": "2",
    "CHECKPOINT_EVERY": "1",
}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def mock_config_file(tmp_path, mocker):
    """
    Points the default config file lookup at a temporary directory so tests
    never pick up a crowdcount.conf from the working directory.
    """

    path = tmp_path / "crowdcount.conf"
    mocker.patch('crowdcount.setup.DEFAULT_CONFIG_FILE', str(path))
    return path


@pytest.fixture
def tiny_flat(tmp_path):
    return {**preset_defaults("desk"), **TINY, "RUN_DIR": str(tmp_path / "run")}


@pytest.fixture
def tiny_cfg(tiny_flat):
    return build_run_config(tiny_flat)


@pytest.fixture
def tiny_samples(tiny_cfg):
    return generate_samples(7, 3, tiny_cfg.scene, tiny_cfg.model.heads.output_stride)
