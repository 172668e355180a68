import numpy as np
import pytest
import torch

from hrirdiff.dataset import SubjectStore, import_bundle
from hrirdiff.synthetic import make_synthetic_bundle

# Keep CPU math reproducible and fast for the small models in the suite.
torch.set_num_threads(2)


@pytest.fixture(scope="session")
def store_root(tmp_path_factory):
    """3-subject synthetic bundle imported into a canonical store."""
    root = tmp_path_factory.mktemp("data")
    make_synthetic_bundle(root / "bundle", n_subjects=3, hrir_length=64,
                          seed=7, n_azimuths=4)
    import_bundle(root / "bundle", root / "store")
    return root / "store"


@pytest.fixture(scope="session")
def store(store_root):
    return SubjectStore(store_root)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
