import numpy as np
import pytest
import torch

from semiseg import ModelConfig, SynthConfig, build_model, generate_synthetic_dataset

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def tiny_model_config():
    return ModelConfig(num_classes=3, units_per_block=2, filters_per_unit=4,
                       num_encoder_blocks=2, dropout_rate=0.2)


@pytest.fixture(scope="session")
def tiny_model(tiny_model_config):
    return build_model(tiny_model_config, init_seed=123)


@pytest.fixture(scope="session")
def tiny_image():
    return np.random.default_rng(7).random((16, 16)).astype(np.float32)


@pytest.fixture(scope="session")
def small_synth_splits():
    cfg = SynthConfig(image_size=(32, 32), num_classes=3, seed=11, noise_std=0.08)
    return generate_synthetic_dataset(cfg, n_labeled=8, n_unlabeled=6, n_test=4)
