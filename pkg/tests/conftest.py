import numpy as np
import pytest
import torch

from conceptshapes import datagen
from conceptshapes.datagen import DatasetConfig, generate_dataset


@pytest.fixture(autouse=True)
def _single_threaded_torch():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """10 classes, 9 concepts, 20 images per class."""
    root = tmp_path_factory.mktemp("small_dataset")
    config = DatasetConfig(num_shapes=4, num_concepts=9, s=0.98,
                           images_per_class=20, master_seed=1234)
    manifest = generate_dataset(config, root)
    return root, manifest


@pytest.fixture
def rng():
    return np.random.default_rng(0)
