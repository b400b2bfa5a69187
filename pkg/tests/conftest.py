import numpy as np
import pytest

from specdetect.hsio import SynthConfig, random_prior, synth_scene
from specdetect.pipeline import ModelSpec, init_param_store


@pytest.fixture
def tiny_spec():
    # smallest config that exercises every namespace
    return ModelSpec(bands=12, patch_size=3, descr_dim=8, adapter_dim=8,
                     embed_dim=8, state_dim=4, heads=2, blocks=1,
                     prior_hidden=8, n_way=3)


@pytest.fixture
def tiny_store(tiny_spec):
    return init_param_store(tiny_spec, seed=0)


@pytest.fixture
def toy_scene():
    """20x20x12 scene with 3 background classes and 8 implants."""
    cfg = SynthConfig(height=20, width=20, bands=12, background_classes=3,
                      implant_count=8, seed=11)
    prior = random_prior(12, seed=11)
    cube, labels, mask = synth_scene(cfg, [prior])
    return cube, labels, mask, prior


def rand_patches(count, side, bands, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(count, side, side, bands))
