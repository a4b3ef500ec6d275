import numpy as np
import pytest

from trigait.dataset import load_dataset, precompute_projections
from trigait.synthesis import SynthConfig, generate_synthetic_dataset


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """16 identities (12 train), 3 sequences each, 24 frames, projections done."""
    root = tmp_path_factory.mktemp("smallds")
    config = SynthConfig(
        num_identities=16,
        sequences_per_identity=3,
        frames_per_sequence=24,
        views_deg=(0.0, 90.0),
        clothing_levels=(0, 2),
        train_fraction=0.75,
        queries_per_identity=1,
    )
    index = generate_synthetic_dataset(config, seed=11, out_dir=root)
    precompute_projections(index, 0.0)
    return load_dataset(root)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
