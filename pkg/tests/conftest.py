import numpy as np
import pytest

from vartex import numerics as nx
from vartex.griddata import SynthConfig, generate_synthetic
from vartex.model import ModelConfig, VartexModel


def tiny_config(**over) -> ModelConfig:
    base = dict(image_size=(8, 8), patch_size=2, embed_dim=16, num_representatives=2,
                num_blocks=2, heads=2, mlp_ratio=2, mixing_interval=1,
                head_depth=2, head_hidden=16, drop_rate=0.0, drop_path=0.0,
                num_variables=4)
    base.update(over)
    return ModelConfig(**base)


def randomize_params(model: VartexModel, seed: int, std: float = 0.05):
    """Overwrite every leaf (including the zero-initialized residual
    projections) so gradient and symmetry tests exercise all paths."""
    rng = np.random.Generator(np.random.PCG64(seed))
    for _, t in model.params.items():
        t.value = nx.truncated_normal(rng, t.value.shape, std, model.params.dtype)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


@pytest.fixture(scope="session")
def small_series():
    """40-step 4-variable 8x8 series for fast train/eval tests."""
    return generate_synthetic(SynthConfig(num_variables=4, height=8, width=8,
                                          steps=40, seed=11))


@pytest.fixture(scope="session")
def desk_series():
    """The full smoke-test series: 8 variables, 32x64, 512 steps."""
    return generate_synthetic(SynthConfig(num_variables=8, steps=512, seed=0))
