import os

import pytest
import torch

# determinism: single-threaded, fixed seeds per test via fixtures
torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _fixed_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def cache_env(tmp_path_factory):
    root = tmp_path_factory.mktemp("cache")
    os.environ["FACEMUG_CACHE"] = str(root)
    return root


@pytest.fixture(scope="session")
def small_specs():
    from facemug.data import random_face_specs
    return random_face_specs(48, 12, seed=7)


@pytest.fixture(scope="session")
def small_corpus(small_specs):
    from facemug.data import SynthCorpus
    return SynthCorpus(small_specs, resolution=64)


@pytest.fixture(scope="session")
def one_face(small_corpus):
    return small_corpus[0]
