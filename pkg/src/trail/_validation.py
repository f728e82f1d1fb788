"""Exceptions and input checks shared by the estimators and pipeline functions."""

from __future__ import annotations

import numpy as np
import torch


class ConfigurationError(ValueError):
    """Invalid hyperparameter or configuration value."""


class ContractError(ValueError):
    """An argument violates an operation's preconditions (shape, range)."""


class NumericalFailure(FloatingPointError):
    """Non-finite loss or gradient. ``where`` names the timestep or iteration."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class TrainingGateError(RuntimeError):
    """A trained component failed its quality gate."""

    def __init__(self, stage, metric, value, threshold):
        super().__init__(
            f"{stage}: {metric}={value:.4f} does not meet gate {threshold}"
        )
        self.stage = stage
        self.metric = metric
        self.value = value
        self.threshold = threshold


def get_device():
    """Compute device from ``TRAIL_DEVICE`` (default ``cpu``)."""
    import os

    return torch.device(os.environ.get("TRAIL_DEVICE", "cpu"))


def as_tensor(x, dtype=torch.float32, device=None):
    if isinstance(x, torch.Tensor):
        return x.to(dtype=dtype, device=device) if device is not None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype, device=device)


def check_images(X, shape=None, allow_single=True):
    """Validate an image batch in [0, 1]; returns a 4-d float tensor.

    A single (C, H, W) image is promoted to a batch of one.
    """
    X = X if isinstance(X, torch.Tensor) else as_tensor(X)
    if not X.is_floating_point():
        X = X.float()
    if X.ndim == 3 and allow_single:
        X = X.unsqueeze(0)
    if X.ndim != 4:
        raise ContractError(f"expected images of shape (n, C, H, W), got {tuple(X.shape)}")
    if shape is not None and tuple(X.shape[1:]) != tuple(shape):
        raise ContractError(f"image shape {tuple(X.shape[1:])} != expected {tuple(shape)}")
    if X.numel() and (X.min() < 0 or X.max() > 1):
        raise ContractError("image values must lie in [0, 1]")
    return X


def check_labels(y, n, n_classes=None):
    y = torch.as_tensor(np.asarray(y) if not isinstance(y, torch.Tensor) else y).long().reshape(-1)
    if y.shape[0] != n:
        raise ContractError(f"{y.shape[0]} labels for {n} images")
    if n_classes is not None and y.numel() and (y.min() < 0 or y.max() >= n_classes):
        raise ContractError(f"labels must lie in [0, {n_classes})")
    return y


def check_timestep(t, T, low=1):
    if not isinstance(t, (int, np.integer)) or isinstance(t, bool):
        raise ContractError(f"timestep must be an integer, got {t!r}")
    if not low <= t <= T:
        raise ContractError(f"timestep {t} outside [{low}, {T}]")
    return int(t)
