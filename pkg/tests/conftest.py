import numpy as np
import pytest
import torch

from fragdesign.model import Model, ModelConfig
from fragdesign.synthetic import overfit_records
from fragdesign.training import TrainConfig, train

torch.set_num_threads(1)

SMALL_CONFIG = dict(
    d_model=32,
    n_layers=1,
    n_heads=2,
    text_d_model=16,
    text_n_layers=1,
    text_n_heads=2,
    frag_d_model=16,
    frag_n_layers=1,
    frag_n_heads=2,
    max_steps=256,
    max_text_len=128,
    max_fragment_len=128,
)


@pytest.fixture
def small_config():
    return ModelConfig(**SMALL_CONFIG)


@pytest.fixture
def small_model(small_config):
    torch.manual_seed(0)
    return Model(small_config)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """One memorization run shared across the suite: 8 distinctive pairs,
    300 effective full-batch steps."""
    out = tmp_path_factory.mktemp("overfit")
    records = overfit_records(8, seed=7)
    model_config = ModelConfig()
    train_config = TrainConfig(
        total_steps=300, max_lr=3e-3, batch_size=8, microbatch_size=4, seed=0
    )
    model, history = train(model_config, train_config, records, out)
    return {
        "model": model,
        "records": records,
        "out": out,
        "history": history,
        "model_config": model_config,
        "train_config": train_config,
    }
