import numpy as np
import pytest
import torch


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TwoConvNet(torch.nn.Module):
    """Minimal two-conv classifier used for attention-gradient oracles."""

    gradcam_layer = "conv2"

    def __init__(self, num_classes=3, channels=4, size=8, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.conv1 = torch.nn.Conv2d(1, channels, 3, padding=1)
        self.conv2 = torch.nn.Conv2d(channels, channels, 3, padding=1)
        self.head = torch.nn.Linear(channels * size * size, num_classes)

    def forward(self, x):
        h = torch.relu(self.conv1(x))
        h = self.conv2(h)
        return self.head(torch.relu(h).flatten(1))


@pytest.fixture
def two_conv_net():
    return TwoConvNet()


def tiny_experiment(tmp_path, name="tiny", **overrides):
    """A fast classification federation config for pipeline tests."""
    doc = {
        "name": name,
        "task": "classification",
        "seed": 0,
        "out_dir": str(tmp_path / name),
        "dataset": {"kind": "synthetic-classification", "num_samples": 600, "num_classes": 4,
                    "image_size": 16, "seed": 1},
        "public_dataset": {"kind": "synthetic-classification", "num_samples": 128,
                           "num_classes": 4, "image_size": 16, "seed": 2},
        "test_dataset": {"kind": "synthetic-classification", "num_samples": 200,
                         "num_classes": 4, "image_size": 16, "seed": 3},
        "partition": {"num_nodes": 2, "alpha": 1.0, "seed": 4, "holdout_fraction": 0.1},
        "node_defaults": {"architecture": "cnn-tiny", "epochs": 2, "batch_size": 32},
        "distill": {"student_architecture": "cnn-tiny", "epochs": 1, "batch_size": 32, "tau": 3.0},
    }
    doc.update(overrides)
    return doc
