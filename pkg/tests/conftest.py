import numpy as np
import pytest

from magnetdml import Dataset, MixtureSpec, Mode, generate_mixture


@pytest.fixture
def interleaved_benchmark():
    """2 classes x 2 interleaved modes in 2-D; opposite-class modes adjoin."""
    spec = MixtureSpec(classes=[
        [Mode([0.0, 0.0], 0.8, 250), Mode([4.0, 4.0], 0.8, 250)],
        [Mode([0.0, 4.0], 0.8, 250), Mode([4.0, 0.0], 0.8, 250)],
    ])
    return generate_mixture(spec, seed=7)


@pytest.fixture
def small_dataset():
    rng = np.random.default_rng(0)
    inputs = rng.standard_normal((30, 3))
    labels = np.repeat(np.arange(3), 10)
    return Dataset(inputs=inputs, labels=labels)
