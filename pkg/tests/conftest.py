import numpy as np
import pytest

from dacn.dataio import SampleSet, TaskBundle, TaskSpec


def toy_samples(n_per_class, mode, rng, v=2, k=8, shift=0.0):
    """Two linearly separable classes: class 1 sits 2 units higher on channel 0."""
    X = rng.normal(0.0, 0.5, size=(2 * n_per_class, v, k)).astype(np.float32)
    y = np.repeat([0, 1], n_per_class)
    X[y == 1, 0] += 2.0
    X[:, 1] += shift
    return SampleSet(X, y, np.full(len(y), mode))


def make_toy_task(n_train=20, n_test=10, seed=0):
    rng = np.random.default_rng(seed)
    spec = TaskSpec("M1", ["M2"], k=8, classes=["F0", "F1"])
    return TaskBundle(
        toy_samples(n_train, "M1", rng),
        toy_samples(n_test, "M1", rng),
        toy_samples(n_test, "M2", rng, shift=0.3),
        spec,
    )


@pytest.fixture
def toy_task():
    return make_toy_task()
