import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from arcopo import numerics as nx
from arcopo.copo import CopoConfig
from arcopo.rewards import PromptSpec
from arcopo.rollout import ArcopoConfig
from arcopo.toygen import WEIGHT_NAMES, ModelDims, ModelParams, pretrain_reference

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

MICRO = ModelDims(chunk_dim=1, context_dim=1, hidden=(1, 1))
SMALL = ModelDims(chunk_dim=2, context_dim=3, hidden=(4, 4))


def perturbed(params: ModelParams, seed: int, scale: float) -> ModelParams:
    z, _ = nx.gaussian(nx.RngStream(seed, ("perturb",)), params.num_params())
    w, off = {}, 0
    for k in WEIGHT_NAMES:
        a = params.weights[k]
        w[k] = a + scale * z[off : off + a.size].reshape(a.shape)
        off += a.size
    return ModelParams(params.dims, w)


@pytest.fixture(scope="session")
def reference():
    """The default pretrained toy generator (seed 0); about 7 s, built once."""
    params, curve = pretrain_reference(0, 2000)
    return params


@pytest.fixture
def small_params():
    return ModelParams.init(nx.RngStream(3, ("small",)), SMALL, out_scale=1.0)


@pytest.fixture
def small_cfg():
    return ArcopoConfig(copo=CopoConfig(group_size=5, anchor_batch=2, learning_rate=1e-2), L=3)


@pytest.fixture
def small_prompt():
    return PromptSpec.from_seed(11, SMALL.chunk_dim)


def assert_params_equal(a: ModelParams, b: ModelParams):
    assert a.dims == b.dims
    for k in WEIGHT_NAMES:
        np.testing.assert_array_equal(a.weights[k], b.weights[k])
