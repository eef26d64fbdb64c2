import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent))

from vireid.data import AugmentationConfig, SyntheticSpec, synthesize_dataset
from vireid.encoders import MiniEncoderConfig
from vireid.model import build_model
from vireid.training import make_training_data

torch.set_num_threads(1)


@pytest.fixture
def mini_model():
    cfg = MiniEncoderConfig(feature_dim=32, token_dim=16, stem_width=8, pool_grid=(4, 2))
    return build_model(cfg, num_identities=4, num_prompt_tokens=4, seed=1)


@pytest.fixture(scope="session")
def tiny_spec():
    return SyntheticSpec(num_identities=4, images_per_identity=6, image_size=(32, 16),
                         noise_std=0.04, jitter=1, seed=3)


@pytest.fixture(scope="session")
def tiny_samples(tiny_spec):
    return synthesize_dataset(tiny_spec)


@pytest.fixture
def tiny_data(tiny_samples):
    aug = AugmentationConfig(target_size=(32, 16), flip_prob=0.0, pad_pixels=1)
    return make_training_data(tiny_samples, num_ids_per_batch=2, instances_per_modality=2,
                              seed=0, augmentation=aug)
