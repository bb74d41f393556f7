import os
from pathlib import Path

import numpy as np
import pytest

from ltl.data_io import load_mnist
from ltl.snn import HIDDEN, OUTPUT, LayerSpec

ARCH = [784, 800, 800, 800, 10]
CACHE = Path(os.environ.get("XDG_CACHE_HOME", Path.home() / ".cache")) / "ltl" / "mnist-5k"


def mnist_dir():
    """LTL_DATA_DIR if set, else the mlxtend 5k sample exported to a cache dir."""
    env = os.environ.get("LTL_DATA_DIR")
    if env:
        return Path(env)
    if not (CACHE / "t10k-labels-idx1-ubyte").exists():
        pytest.importorskip("mlxtend")
        from ltl.data_io import export_mnist_subset

        export_mnist_subset(CACHE)
    return CACHE


def is_full_mnist(data):
    return len(data.train) == 60000 and len(data.test) == 10000


@pytest.fixture(scope="session")
def mnist():
    return load_mnist(mnist_dir())


@pytest.fixture(scope="session")
def teacher(mnist):
    from ltl.teacher import train_teacher

    return train_teacher(mnist.train, ARCH, seed=0)


def net_from(weights, biases):
    """LayerSpec list from plain arrays; the last layer is the integrator."""
    n = len(weights)
    return [
        LayerSpec(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64), OUTPUT if i == n - 1 else HIDDEN)
        for i, (w, b) in enumerate(zip(weights, biases))
    ]
