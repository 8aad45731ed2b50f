import numpy as np
import pytest
import torch
import torch.nn as nn

from advdef import CNNClassifier
from advdef.config import ExperimentConfig, DatasetConfig, ClassifierConfig, DefenseConfig
from advdef.data import load_dataset, load_classifier_training_set


def tiny_config(seed=0, **kwargs) -> ExperimentConfig:
    """Small-but-real config used across the unit tests."""
    cfg = ExperimentConfig(
        seed=seed,
        dataset=DatasetConfig(train_per_class=6, test_per_class=8,
                              classifier_train_per_class=40),
        classifier=ClassifierConfig(epochs=8),
        pairing_per_attack=1,
    )
    for key, value in kwargs.items():
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


@pytest.fixture(scope="session")
def cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def datasets(cfg):
    return {
        "train": load_dataset(cfg, "train"),
        "test": load_dataset(cfg, "test"),
        "clf_train": load_classifier_training_set(cfg),
    }


@pytest.fixture(scope="session")
def classifier(cfg, datasets):
    clf = CNNClassifier(epochs=cfg.classifier.epochs, seed=cfg.seed)
    clf.fit(datasets["clf_train"].images, datasets["clf_train"].labels)
    return clf


class LinearImageModel(nn.Module):
    """Flattened linear softmax model for analytic oracles."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None):
        super().__init__()
        out_dim, in_dim = weight.shape
        self.linear = nn.Linear(in_dim, out_dim,
                                bias=bias is not None)
        with torch.no_grad():
            self.linear.weight.copy_(torch.tensor(weight, dtype=torch.float32))
            if bias is not None:
                self.linear.bias.copy_(torch.tensor(bias, dtype=torch.float32))

    def forward(self, x):
        return self.linear(x.flatten(1))


def rand_images(rng: np.random.Generator, n, size=8, channels=3):
    return rng.uniform(0.0, 1.0, (n, size, size, channels)).astype(np.float32)
