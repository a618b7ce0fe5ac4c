import numpy as np
import pytest
import torch

# bit-reproducible runs need a single logical thread
torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))
