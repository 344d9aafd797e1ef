import copy

import pytest

from config.loader import train_config_from_dict
from config.settings import Settings

# 800-sample clips at 16 kHz: two 40 Hz latent frames per item
TINY_TRAIN = {
    "model": {
        "sample_rate_hz": 16000,
        "hop": 400,
        "latent_dim": 4,
        "strides": [5, 4, 4, 5],
        "encoder_channels": [4, 4, 8, 8, 8],
        "decoder_channels": [8, 8, 8, 4, 4],
        "n_mels": 32,
        "mel_n_fft": 1024,
    },
    "rate": {"target_kl_nats": 2.0},
    "dataset": {"n_items": 8, "segment_s": 0.05, "eval_fraction": 0.25, "seed": 3},
    "steps": 3,
    "batch_size": 2,
    "lr": 1e-3,
    "eval_every": 2,
    "log_every": 1,
    "mel_scales": [[512, 32], [256, 16]],
    "stft_ffts": [256, 128],
    "disc_channels": 4,
}


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def isolated_output(tmp_path, monkeypatch):
    """Keep logs and default outputs inside the test's tmp dir"""
    monkeypatch.setenv("RATEBENCH_OUTPUT_ROOT", str(tmp_path / "runs"))
    monkeypatch.setattr(Settings, "LOG_DIR", str(tmp_path / "logs"))


@pytest.fixture
def tiny_train_dict():
    return copy.deepcopy(TINY_TRAIN)


@pytest.fixture
def tiny_config(tiny_train_dict):
    return train_config_from_dict(tiny_train_dict)


@pytest.fixture
def make_config(tiny_train_dict):
    """Tiny TrainConfig with nested overrides, e.g. make_config(bottleneck={"kind": "vq"})"""

    def _make(**overrides):
        raw = copy.deepcopy(tiny_train_dict)
        for key, value in overrides.items():
            if isinstance(value, dict) and isinstance(raw.get(key), dict):
                raw[key] = {**raw[key], **value}
            else:
                raw[key] = value
        return train_config_from_dict(raw)

    return _make
