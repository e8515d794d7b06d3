import numpy as np
import pytest

from tea import autodiff as ad
from tea.data import prepare_dataset
from tea.params import init_params

from corpus import cycle_corpus, write_corpus


@pytest.fixture(scope="session")
def tiny_params():
    """Small TEA-S parameter set shared by formula-oracle tests."""
    return init_params(n_users=3, n_items=5, d=4, l_s=3, variant="tea-s", seed=11)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """Prepared 10-user / 20-item cycle corpus for trainer and CLI tests."""
    tmp = tmp_path_factory.mktemp("toy_corpus")
    rows, pairs = cycle_corpus(n_users=10, n_items=20, length=16, stride=2)
    inter, social = write_corpus(str(tmp), rows, pairs)
    return prepare_dataset(inter, social, l_s=16, l_n=5, seed=0)


def rand_tensor(rng: np.random.Generator, *shape, scale: float = 1.0,
                grad: bool = True) -> ad.Tensor:
    return ad.Tensor(rng.normal(scale=scale, size=shape), requires_grad=grad)
