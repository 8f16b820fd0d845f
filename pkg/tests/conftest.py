import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import write_idx  # noqa: E402

from mmrb.data import synthetic_dataset  # noqa: E402
from mmrb.model import build_lenet  # noqa: E402

MNIST_DIR = Path(os.environ.get("MMRB_DATA_DIR", "/root/data/mnist"))


def mnist_available() -> bool:
    return any(MNIST_DIR.glob("train*labels*")) if MNIST_DIR.is_dir() else False


requires_mnist = pytest.mark.skipif(not mnist_available(), reason=f"MNIST files not found in {MNIST_DIR}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_model():
    """Untrained LeNet on 12x12 single-channel inputs; fast for attack tests."""
    return build_lenet(1, 12, (3, 4), 2, (16, 12), 10, seed=3, kernel=3)


@pytest.fixture(scope="session")
def tiny_data():
    return synthetic_dataset(60, side=12, seed=4)


@pytest.fixture
def fake_mnist(tmp_path):
    """A 64/32-image IDX directory laid out like the canonical MNIST files."""
    rng = np.random.default_rng(0)
    d = tmp_path / "mnist"
    d.mkdir()
    for prefix, n in (("train", 64), ("t10k", 32)):
        labels = np.arange(n) % 10
        protos = rng.integers(0, 256, size=(10, 28, 28))
        imgs = np.clip(protos[labels] + rng.integers(-20, 20, size=(n, 28, 28)), 0, 255)
        write_idx(d, prefix, imgs, labels)
    return d
