import math

import numpy as np
import pytest
import torch
from torch import nn

from trail.codec import identity_codec
from trail.denoiser import DenoiserModel
from trail.schedule import build_linear_schedule

_CRITERIA = []


class LinearClassifier:
    """Tiny differentiable classifier with the zoo interface (log_proba / predict)."""

    def __init__(self, shape, n_classes=10, seed=0, dtype=torch.float32):
        gen = torch.Generator().manual_seed(seed)
        d = int(np.prod(shape))
        self.net = nn.Linear(d, n_classes).to(dtype)
        with torch.no_grad():
            self.net.weight.copy_(torch.randn(n_classes, d, generator=gen, dtype=dtype))
            self.net.bias.copy_(torch.randn(n_classes, generator=gen, dtype=dtype))
        self.net.requires_grad_(False)
        self.identity = f"linear-{seed}"

    def log_proba(self, x):
        return torch.log_softmax(self.net(x.flatten(1).to(self.net.weight.dtype)), dim=1)

    def parameters(self):
        return self.net.parameters()

    def predict(self, X):
        with torch.no_grad():
            return self.log_proba(torch.as_tensor(np.asarray(X))).argmax(1).numpy()


class UniformClassifier:
    def __init__(self, n_classes=10):
        self.n_classes = n_classes

    def log_proba(self, x):
        return torch.full((len(x), self.n_classes), -math.log(self.n_classes), dtype=x.dtype) + 0 * x.flatten(1)[:, :1]


@pytest.fixture
def schedule():
    return build_linear_schedule(80)


@pytest.fixture
def small_shape():
    return (8, 4, 4)


@pytest.fixture
def small_denoiser(small_shape):
    """Untrained but deterministic U-Net on a small latent."""
    return DenoiserModel(latent_shape=small_shape, channels=8, t_dim=16, epochs=0).fit(torch.zeros(2, *small_shape))


@pytest.fixture
def small_codec(small_shape):
    return identity_codec(small_shape)


@pytest.fixture
def linear_clf(small_shape):
    return LinearClassifier(small_shape)


@pytest.fixture
def criterion_report():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number, passed, detail):
        _CRITERIA.append((number, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_CRITERIA, key=lambda c: c[0]):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
