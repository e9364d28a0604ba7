import numpy as np
import pytest

from foldnet.autodiff import Tensor, narrow, reshape


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def flatten_tensors(tensors: dict) -> np.ndarray:
    names = sorted(tensors)
    return np.concatenate([tensors[n].data.reshape(-1) for n in names])


def with_flat_params(tensors: dict, fn):
    """Adapter for finite_diff_check over every tensor in a parameter dict.

    Returns (f, theta0) where f(theta) temporarily replaces each entry with a
    slice of the flat parameter so gradients flow through one tensor.
    """
    names = sorted(tensors)
    shapes = [tensors[n].data.shape for n in names]
    sizes = [tensors[n].data.size for n in names]
    original = dict(tensors)
    theta0 = np.concatenate([tensors[n].data.reshape(-1) for n in names])

    def f(p: Tensor):
        try:
            offset = 0
            for name, shape, size in zip(names, shapes, sizes):
                tensors[name] = reshape(narrow(p, 0, offset, size), shape)
                offset += size
            return fn()
        finally:
            tensors.update(original)

    return f, theta0
