import numpy as np
import pytest
import torch

from adasam.model import AdaSamModel, ModelConfig
from adasam.phantom import PhantomConfig, build_dataset
from adasam.training import TrainConfig

# tiny configuration for fast unit tests
TINY_MODEL = dict(
    image_size=32, patch_size=4, embed_dim=32, depth=1, heads=2, decoder_dim=16,
    decoder_heads=2, lora_rank=4,
)

# desk-scale configuration used by the experiment-level tests: small enough to
# train in under a minute on two CPU cores, large enough that prompting works
SMALL_MODEL = dict(
    image_size=64, patch_size=8, embed_dim=96, depth=2, heads=4, decoder_dim=48,
)
SMALL_TRAIN = dict(
    epochs=16, batch_size=8, lr=1e-3,
)


def tiny_model_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**TINY_MODEL, **overrides})


def small_model_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**SMALL_MODEL, **overrides})


def small_train_config(budget: int, seed: int = 0, **overrides) -> TrainConfig:
    return TrainConfig(label_budget=budget, seed=seed, **{**SMALL_TRAIN, **overrides})


@pytest.fixture(scope="session")
def phantom_dataset(tmp_path_factory):
    """200/10/40 phantom dataset at 64px, shared by the training-level tests."""
    out = tmp_path_factory.mktemp("phantoms")
    config = PhantomConfig(image_size=64, n_train=200, n_val=10, n_test=40, seed=7)
    return build_dataset(config, out)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_phantoms")
    config = PhantomConfig(image_size=32, n_train=24, n_val=4, n_test=8, seed=11)
    return build_dataset(config, out)


@pytest.fixture(scope="session")
def smoke_model(phantom_dataset, tmp_path_factory):
    """One trained desk-scale model (budget 100), shared across tests that
    need working prompts; training it takes about a minute."""
    from adasam.model import load_checkpoint
    from adasam.training import BEST_CHECKPOINT, fit

    out = tmp_path_factory.mktemp("smoke_model")
    model = AdaSamModel(small_model_config(seed=0))
    fit(model, phantom_dataset, small_train_config(budget=100, seed=0), out)
    return load_checkpoint(out / BEST_CHECKPOINT)


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(1234)
    np.random.seed(1234)
