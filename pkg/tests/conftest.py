import numpy as np
import pytest
import torch

from augbackdoor.core import Batch, RngStream, load_dataset
from augbackdoor.synth import write_synthetic_mnist
from augbackdoor.trigger import checkerboard_patch


@pytest.fixture(scope="session")
def data_root(tmp_path_factory):
    """Synthetic digit dataset in MNIST IDX layout, shared across the session."""
    root = tmp_path_factory.mktemp("data")
    write_synthetic_mnist(root, n_train=2000, n_test=500, seed=7)
    return root


@pytest.fixture(scope="session")
def mnist_train(data_root):
    return load_dataset("mnist", data_root, "train")


@pytest.fixture(scope="session")
def mnist_test(data_root):
    return load_dataset("mnist", data_root, "test")


@pytest.fixture()
def patch28():
    return checkerboard_patch((1, 28, 28), size=4)


@pytest.fixture()
def small_batch():
    rng = RngStream(3, "test-batch")
    images = torch.from_numpy(rng.gen.random((8, 1, 28, 28))).float()
    labels = torch.from_numpy(rng.gen.integers(0, 10, size=8)).long()
    return Batch(images, labels)


def random_image(seed: int, shape=(1, 28, 28)) -> torch.Tensor:
    gen = np.random.default_rng(seed)
    return torch.from_numpy(gen.random(shape)).float()
