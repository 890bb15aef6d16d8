import os
from pathlib import Path

import numpy as np
import pytest
import torch

from modelguard.data import ImageBatch
from modelguard.models import Classifier, build_lenet5
from modelguard.training import TrainConfig, train

torch.set_num_threads(1)


def make_toy_batch(n: int = 600, seed: int = 0) -> ImageBatch:
    """Ten separable 28x28 classes: one fixed random prototype per class plus noise."""
    rng = np.random.default_rng(seed)
    prototypes = rng.random((10, 28, 28, 1)) ** 3
    labels = np.arange(n) % 10
    pixels = np.clip(prototypes[labels] + 0.15 * rng.standard_normal((n, 28, 28, 1)), 0, 1)
    return ImageBatch(pixels.astype(np.float32), labels)


@pytest.fixture(scope="session")
def toy_data():
    return make_toy_batch()


@pytest.fixture(scope="session")
def toy_model(toy_data):
    """A LeNet-5 that fits the toy task; tests must clone it before mutating."""
    model = build_lenet5(seed=0)
    train(model, toy_data, TrainConfig(epochs=3, batch_size=32, seed=0))
    model.eval()
    return model


def mnist_root():
    root = Path(os.environ.get("MODELGUARD_MNIST", "/root/data/mnist"))
    return root if root.is_dir() else None


class TableModel(Classifier):
    """Returns a fixed probability vector chosen by the first pixel (index = pixel * 255)."""

    kind = "table"

    def __init__(self, table):
        table = np.asarray(table, dtype=np.float64)
        super().__init__(table.shape[1], (2, 2, 1))
        self.unused = torch.nn.Parameter(torch.zeros(1))
        self.register_buffer("log_table", torch.log(torch.as_tensor(table, dtype=torch.float32)))

    def forward(self, x):
        index = torch.round(x[:, 0, 0, 0] * 255).long()
        return self.log_table[index] + 0 * self.unused


def table_inputs(indices):
    x = np.zeros((len(indices), 2, 2, 1), np.float32)
    x[:, 0, 0, 0] = np.asarray(indices) / 255.0
    return x


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
