import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ganodet.config import ExperimentConfig
from ganodet.dataio import build_split, generate_synthetic_corpus
from ganodet.ganmodel import build_model, train


@pytest.fixture(scope="session")
def tiny_trained():
    """A small model trained briefly on the synthetic corpus: good enough
    for gradient checks and search mechanics, cheap enough for every test."""
    data = generate_synthetic_corpus(256, 0.15, seed=41)
    split = build_split(data, 0, seed=41)
    cfg = ExperimentConfig(seed=41, epochs=40, batch_size=32,
                           gamma=0.1, z_dim=16,
                           gen_hidden=[64, 128], disc_hidden=[128, 64])
    model = build_model(cfg, 28, 28)
    train(model, split.normal_train(), split.abnormal_train(), cfg)
    return model, cfg, split


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
