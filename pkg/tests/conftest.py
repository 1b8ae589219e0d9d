import numpy as np
import pytest

from flowfuse.flow import init_model, named_parameters
from flowfuse.numerics import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


def randomized_model(channels=4, blocks=3, hidden=6, seed=7, scale=None,
                     dtype=np.float32):
    """Model with every parameter perturbed (couplings are not identity).

    The default perturbation shrinks with depth so activations stay O(1);
    round-trip float error grows with the activation magnitude, which is a
    property of the arithmetic, not of the architecture.
    """
    if scale is None:
        scale = 0.1 / blocks
    gen = make_rng(seed)
    model = init_model(channels, blocks, hidden, gen, dtype=dtype)
    for _, arr in named_parameters(model):
        arr += gen.normal(0.0, scale, size=arr.shape).astype(arr.dtype)
    return model
