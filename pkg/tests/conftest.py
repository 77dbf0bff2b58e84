import numpy as np
import pytest
import torch

from jointboost.datapipe import GENERATED, REAL, make_batch
from jointboost.model import JointModel, TinyConvBackbone


def pytest_runtest_logreport(report):
    """Print one pass/fail line per acceptance criterion."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    print(f"\n[acceptance] {name}: {report.outcome.upper()}")


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_model():
    torch.manual_seed(7)
    return JointModel(TinyConvBackbone(in_channels=1, num_classes=3, width=4), num_classes=3)


def random_batch(rng, n=6, size=5, channels=1, num_classes=3, provenance=REAL, seed_labels=True):
    pixels = rng.uniform(0.05, 0.95, size=(n, size, size, channels)).astype(np.float32)
    labels = rng.integers(0, num_classes, size=n)
    return make_batch(pixels, labels, provenance)
