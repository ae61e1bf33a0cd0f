import numpy as np
import pytest

from graftnet.backbone import (
    BackboneConfig,
    build_backbone,
    detach_branch,
    export_trunk,
    graft,
)

# small enough that every structural test stays sub-second
TINY = BackboneConfig(
    block_count=3,
    widths=(4, 6, 8),
    downsample_blocks=frozenset({1}),
    input_shape=(3, 8, 8),
    conv_layers_per_block=1,
)


def build_tiny_model(seed=0):
    model = build_backbone(TINY, seed=seed)
    model.add_head("boxy", ["not_boxy", "boxy"], "gap")
    model.add_head("glow", ["dark", "mid", "bright"], "gap")
    return model


def rand_images(n, shape=(3, 8, 8), seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, *shape)).astype(np.float32)


@pytest.fixture(scope="session")
def tiny_config():
    return TINY


@pytest.fixture
def tiny_model():
    return build_tiny_model()


@pytest.fixture
def tiny_trunk(tiny_model):
    return export_trunk(tiny_model, depth=3)


@pytest.fixture
def tiny_branch(tiny_model):
    return detach_branch(tiny_model, 1, 3, "boxy")


@pytest.fixture
def tiny_composite(tiny_model):
    trunk = export_trunk(tiny_model, depth=1)
    branches = [detach_branch(tiny_model, 1, 3, a) for a in ("boxy", "glow")]
    return graft(trunk, branches)
