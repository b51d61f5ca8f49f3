import numpy as np
import pytest
import torch

from catsg import oscillator as osc


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_vm():
    ds = osc.build_dataset("VM", {"train": 64, "val": 16, "test": 16}, osc.SeqConfig(), seed=3)
    return osc.build_cf_pairs(ds, seed=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
