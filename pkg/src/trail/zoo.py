"""Desk-scale classifier zoo: one surrogate plus architecturally distinct targets."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn
from torch.nn import functional as F

from trail import checkpoint
from trail._validation import ConfigurationError, TrainingGateError, check_images, check_labels
from trail.data import N_CLASSES

log = logging.getLogger(__name__)

ARCHITECTURES = ("small-cnn-a", "small-cnn-b", "small-resnet", "tiny-vit")
NORMALIZATION = {"mean": 0.5, "std": 0.25}


class _Normalize(nn.Module):
    def forward(self, x):
        return (x - NORMALIZATION["mean"]) / NORMALIZATION["std"]


def _small_cnn_a():
    def block(c_in, c_out):
        return [nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]

    return nn.Sequential(
        _Normalize(),
        *block(3, 32),
        *block(32, 64),
        *block(64, 96),
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Linear(96, N_CLASSES),
    )


def _small_cnn_b():
    return nn.Sequential(
        _Normalize(),
        nn.Conv2d(3, 24, 5, stride=2, padding=2),
        nn.ELU(),
        nn.Conv2d(24, 48, 5, stride=2, padding=2),
        nn.ELU(),
        nn.Conv2d(48, 64, 3, stride=2, padding=1),
        nn.ELU(),
        nn.Flatten(),
        nn.Linear(64 * 4 * 4, 128),
        nn.ELU(),
        nn.Linear(128, N_CLASSES),
    )


class _BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.short = nn.Identity()
        if stride != 1 or c_in != c_out:
            self.short = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(h)) + self.short(x))


def _small_resnet():
    return nn.Sequential(
        _Normalize(),
        nn.Conv2d(3, 16, 3, padding=1, bias=False),
        nn.BatchNorm2d(16),
        nn.ReLU(),
        _BasicBlock(16, 16, 1),
        _BasicBlock(16, 32, 2),
        _BasicBlock(32, 64, 2),
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Linear(64, N_CLASSES),
    )


class _TinyViT(nn.Module):
    def __init__(self, patch=4, dim=64, depth=2, heads=4):
        super().__init__()
        self.norm_in = _Normalize()
        self.embed = nn.Conv2d(3, dim, patch, stride=patch)
        n_tokens = (32 // patch) ** 2
        self.cls = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos = nn.Parameter(torch.randn(1, n_tokens + 1, dim) * 0.02)
        layer = nn.TransformerEncoderLayer(
            dim, heads, dim_feedforward=2 * dim, dropout=0.0, activation="gelu", batch_first=True, norm_first=True
        )
        self.blocks = nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, N_CLASSES)

    def forward(self, x):
        h = self.embed(self.norm_in(x)).flatten(2).transpose(1, 2)
        h = torch.cat([self.cls.expand(len(h), -1, -1), h], dim=1) + self.pos
        h = self.blocks(h)
        return self.head(self.norm(h[:, 0]))


_BUILDERS = {
    "small-cnn-a": _small_cnn_a,
    "small-cnn-b": _small_cnn_b,
    "small-resnet": _small_resnet,
    "tiny-vit": _TinyViT,
}


def build_network(arch):
    if arch not in _BUILDERS:
        raise ConfigurationError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
    return _BUILDERS[arch]()


class ZooClassifier(BaseEstimator, ClassifierMixin):
    """Image classifier over the toy classes.

    ``predict_proba`` works on numpy batches; ``log_proba`` is the
    differentiable torch path used by the attacks.
    """

    def __init__(
        self,
        arch="small-cnn-a",
        epochs=8,
        batch_size=64,
        lr=2e-3,
        weight_decay=1e-4,
        label_smoothing=0.1,
        seed=0,
        min_accuracy=0.6,
    ):
        self.arch = arch
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.label_smoothing = label_smoothing
        self.seed = seed
        self.min_accuracy = min_accuracy

    @property
    def identity(self):
        return self.arch

    @property
    def n_classes(self):
        return N_CLASSES

    def _build(self):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            self.net_ = build_network(self.arch)
        self.classes_ = np.arange(N_CLASSES)
        self.metrics_ = {}
        return self

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, len(X), N_CLASSES)
        self._build()
        gen = torch.Generator().manual_seed(self.seed)
        opt = torch.optim.AdamW(self.net_.parameters(), lr=self.lr, weight_decay=self.weight_decay)
        n_batches = max(1, len(X) // self.batch_size)
        sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=self.lr, total_steps=max(1, self.epochs * n_batches))
        self.net_.train()
        history = []
        for epoch in range(self.epochs):
            perm = torch.randperm(len(X), generator=gen)
            total = 0.0
            for b in range(n_batches):
                idx = perm[b * self.batch_size : (b + 1) * self.batch_size]
                xb = X[idx]
                # random horizontal flips; shapes are flip-symmetric up to rotation noise
                flip = torch.rand(len(xb), generator=gen) < 0.5
                xb = torch.where(flip[:, None, None, None], xb.flip(-1), xb)
                # smoothing keeps logits bounded; saturated softmax would zero attack gradients
                loss = F.cross_entropy(self.net_(xb), y[idx], label_smoothing=self.label_smoothing)
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
                total += loss.item()
            history.append(total / n_batches)
            log.info("%s epoch %d loss %.4f", self.arch, epoch, history[-1])
        self.net_.eval()
        self.net_.requires_grad_(False)
        self.metrics_ = {"train_loss": history}
        return self

    def log_proba(self, x):
        """Differentiable log-probabilities of a batch (n, 3, H, W)."""
        return F.log_softmax(self.net_(x.to(self._dtype())), dim=1)

    def _dtype(self):
        return next(self.net_.parameters()).dtype

    def predict_proba(self, X, batch_size=256):
        check_is_fitted(self, "net_")
        X = check_images(X)
        with torch.no_grad():
            out = [self.log_proba(X[i : i + batch_size]).exp() for i in range(0, len(X), batch_size)]
        return torch.cat(out).double().numpy()

    def predict(self, X):
        return self.predict_proba(X).argmax(1)

    def evaluate(self, X, y):
        acc = float(np.mean(self.predict(X) == np.asarray(y)))
        self.metrics_["clean_accuracy"] = acc
        return acc

    def check_gate(self):
        acc = self.metrics_.get("clean_accuracy")
        if acc is None or acc < self.min_accuracy:
            raise TrainingGateError(f"zoo:{self.arch}", "clean_accuracy", acc or 0.0, self.min_accuracy)

    def parameters(self):
        return self.net_.parameters()

    def to(self, dtype):
        import copy

        other = copy.deepcopy(self)
        other.net_.to(dtype)
        return other

    def save(self, path):
        meta = {
            "params": self.get_params(),
            "preprocessing": {"input": [3, 32, 32], **NORMALIZATION},
            "metrics": self.metrics_,
        }
        return checkpoint.save_checkpoint(path, "classifier", self.net_.state_dict(), meta)

    @classmethod
    def load(cls, path, expected_sha256=None):
        state, meta = checkpoint.load_checkpoint(path, "classifier", expected_sha256)
        clf = cls(**meta["params"])._build()
        clf.net_.load_state_dict(state)
        clf.net_.eval()
        clf.net_.requires_grad_(False)
        clf.metrics_ = meta["metrics"]
        return clf


def train_classifier(arch, dataset, epochs, seed, X_test=None, y_test=None, **params):
    """Train ``arch`` on ``dataset = (X, y)`` and enforce the clean-accuracy gate."""
    if arch not in _BUILDERS:
        raise ConfigurationError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
    X, y = dataset
    clf = ZooClassifier(arch=arch, epochs=epochs, seed=seed, **params).fit(X, y)
    if X_test is not None:
        clf.evaluate(X_test, y_test)
        clf.check_gate()
    return clf


def predict(clf, x):
    """Probability vector of one image, or a matrix for a batch."""
    single = np.ndim(x) == 3
    p = clf.predict_proba(x)
    return p[0] if single else p


class ModelRegistry:
    """Identity -> (checkpoint path, architecture, clean accuracy, sha256).

    Persisted as pretty-printed JSON next to the checkpoints.
    """

    def __init__(self, entries=None):
        self.entries = dict(entries or {})

    def register(self, clf, path, accuracy, sha256):
        if clf.identity in self.entries:
            raise ConfigurationError(f"duplicate classifier identity {clf.identity!r}")
        if accuracy < clf.min_accuracy:
            raise TrainingGateError(f"zoo:{clf.arch}", "clean_accuracy", accuracy, clf.min_accuracy)
        self.entries[clf.identity] = {
            "checkpoint": str(path),
            "architecture": clf.arch,
            "clean_accuracy": accuracy,
            "sha256": sha256,
        }

    def __contains__(self, identity):
        return identity in self.entries

    def __iter__(self):
        return iter(sorted(self.entries))

    def load(self, identity, root="."):
        entry = self.entries[identity]
        return ZooClassifier.load(Path(root) / entry["checkpoint"], expected_sha256=entry["sha256"])

    def load_all(self, root="."):
        return {k: self.load(k, root) for k in self}

    def save(self, path):
        Path(path).write_text(json.dumps({"schema_version": 1, "classifiers": self.entries}, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path):
        data = json.loads(Path(path).read_text())
        return cls(data["classifiers"])
