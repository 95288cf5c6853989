import numpy as np
import pytest

from permtensor.dataset import GeneratorParams, generate_dataset
from permtensor.model import ModelConfig


@pytest.fixture(scope="session")
def small_dataset():
    """40 labelled 16x16 samples split 24/8/8; a few seconds of LBM."""
    gen = GeneratorParams(size=16, correlation_length=1.5)
    return generate_dataset(40, seed=11, gen=gen,
                            splits={"train": 0.6, "val": 0.2, "test": 0.2})


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(image_size=16, stem_channels=4, stage_channels=(8,),
                       blocks_per_stage=(1,), head_hidden=(8, 4), porosity_hidden=(4,),
                       porosity_embed_dim=4, mbconv_expand=2, film_stages=(0,))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_tensors(rng, n, symmetric=False):
    k = rng.standard_normal((n, 4))
    if symmetric:
        k[:, 2] = k[:, 1]
    return k
