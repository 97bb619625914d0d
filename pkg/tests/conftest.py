import numpy as np
import pytest

from uniwm.codebook import Codebook
from uniwm.model import ModelConfig, init_params
from uniwm.vocab import VocabLayout


@pytest.fixture(scope="session")
def tiny_layout():
    """Small vocabulary so finite-difference checks stay fast."""
    return VocabLayout(pose_bins=8, codebook_size=16)


@pytest.fixture(scope="session")
def tiny_config(tiny_layout):
    return ModelConfig(vocab_size=tiny_layout.vocab_size, n_layers=2, n_heads=2, d_model=32, context_len=128)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=11)


@pytest.fixture(scope="session")
def tiny_codebook():
    rng = np.random.default_rng(5)
    vecs = rng.random((16, 2 * 2 * 3)).astype(np.float32)
    return Codebook(vectors=vecs, patch_h=2, patch_w=2)


def make_tiny_sample(layout, role, n_img=4, stop=False):
    """Hand-assembled sample on the tiny vocabulary (images are 4x4, patch 2)."""
    from uniwm.geometry import Action, Pose
    from uniwm.samples import build_planner_sample, build_world_sample

    rng = np.random.default_rng(3)
    codes = [rng.integers(0, 16, size=n_img) for _ in range(4)]
    pose = Pose(1.0, 1.0, 0.1)
    extent = (0.0, 4.0, 0.0, 4.0)
    action = Action(stop=True) if stop else Action.move(0.31, -0.12, 0.05)
    if role == "planner":
        return build_planner_sample(codes[0], codes[1], codes[2], pose, extent, action, layout)
    return build_world_sample(codes[0], codes[1], codes[2], pose, extent, action, codes[3], layout)
