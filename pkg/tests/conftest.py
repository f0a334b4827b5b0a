import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def rng_factory():
    def make(seed: int = 0):
        return np.random.default_rng(seed)
    return make


def random_logits(rng, b=2, k=3, h=4, w=4, scale=2.0) -> torch.Tensor:
    return torch.from_numpy(
        (rng.standard_normal((b, k, h, w)) * scale).astype(np.float32))


def random_labels(rng, b=2, k=3, h=4, w=4, p_ignore=0.0,
                  ignore_value=255) -> torch.Tensor:
    lab = rng.integers(0, k, size=(b, h, w))
    if p_ignore > 0:
        lab = np.where(rng.random((b, h, w)) < p_ignore, ignore_value, lab)
    return torch.from_numpy(lab.astype(np.int64))
