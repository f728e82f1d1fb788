"""Noise-prediction network eps_theta(z_t, t) and its denoising pre-training."""

from __future__ import annotations

import copy
import logging
import math

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn
from torch.nn import functional as F

from trail import checkpoint
from trail._validation import ContractError, NumericalFailure, TrainingGateError, as_tensor, check_timestep
from trail.schedule import build_linear_schedule

log = logging.getLogger(__name__)


def timestep_embedding(t, dim):
    """Sinusoidal embedding of integer timesteps ``t`` (shape (n,))."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    return torch.cat([args.sin(), args.cos()], dim=1)


class _ResBlock(nn.Module):
    def __init__(self, c_in, c_out, t_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class UNet(nn.Module):
    """Two-resolution U-Net with sinusoidal timestep conditioning."""

    def __init__(self, in_channels, channels=32, t_dim=64):
        super().__init__()
        self.t_dim = t_dim
        self.time_mlp = nn.Sequential(nn.Linear(t_dim, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        c1, c2 = channels, 2 * channels
        self.conv_in = nn.Conv2d(in_channels, c1, 3, padding=1)
        self.down1 = _ResBlock(c1, c1, t_dim)
        self.downsample = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.down2 = _ResBlock(c1, c2, t_dim)
        self.mid = _ResBlock(c2, c2, t_dim)
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")
        self.up1 = _ResBlock(c2 + c1, c1, t_dim)
        self.norm_out = nn.GroupNorm(8, c1)
        self.conv_out = nn.Conv2d(c1, in_channels, 3, padding=1)

    def forward(self, x, t):
        temb = self.time_mlp(timestep_embedding(t, self.t_dim).to(x.dtype))
        h0 = self.down1(self.conv_in(x), temb)
        h = self.down2(self.downsample(h0), temb)
        h = self.mid(h, temb)
        h = self.up1(torch.cat([self.upsample(h), h0], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


class DenoiserModel(BaseEstimator):
    """eps_theta wrapped as an estimator; ``fit`` runs denoising pre-training on latents.

    The model is unconditional. ``grad_calls_`` counts forward passes made
    while the parameters were being recorded for autograd.
    """

    def __init__(
        self,
        latent_shape=(4, 16, 16),
        channels=32,
        t_dim=64,
        T=80,
        beta_start=1e-4,
        beta_end=0.02,
        epochs=20,
        batch_size=64,
        lr=2e-3,
        seed=0,
        max_val_loss=0.5,
    ):
        self.latent_shape = latent_shape
        self.channels = channels
        self.t_dim = t_dim
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.max_val_loss = max_val_loss

    def _build(self):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            self.net_ = UNet(self.latent_shape[0], self.channels, self.t_dim)
        self.schedule_ = build_linear_schedule(self.T, self.beta_start, self.beta_end)
        self.trained_ = False
        self.grad_calls_ = 0
        self.metrics_ = {}
        return self

    def fit(self, Z, y=None, Z_val=None):
        """Denoising score-matching pre-training on latents ``Z`` (n, *latent_shape)."""
        Z = as_tensor(Z)
        if tuple(Z.shape[1:]) != tuple(self.latent_shape):
            raise ContractError(f"latent shape {tuple(Z.shape[1:])} != {tuple(self.latent_shape)}")
        self._build()
        if self.epochs == 0:
            self.net_.eval()
            return self
        gen = torch.Generator().manual_seed(self.seed)
        ab = torch.tensor(self.schedule_.alpha_bars, dtype=torch.float32)
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.lr)
        n_batches = max(1, len(Z) // self.batch_size)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=self.epochs * n_batches)
        history = []
        self.net_.train()
        for epoch in range(self.epochs):
            perm = torch.randperm(len(Z), generator=gen)
            total = 0.0
            for b in range(n_batches):
                z0 = Z[perm[b * self.batch_size : (b + 1) * self.batch_size]]
                t = torch.randint(1, self.T + 1, (len(z0),), generator=gen)
                eps = torch.randn(z0.shape, generator=gen)
                a = ab[t - 1].reshape(-1, 1, 1, 1)
                zt = a.sqrt() * z0 + (1 - a).sqrt() * eps
                loss = F.mse_loss(self.net_(zt, t), eps)
                if not torch.isfinite(loss):
                    raise NumericalFailure(f"denoiser pre-training diverged at epoch {epoch}", where=epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
                total += loss.item()
            history.append(total / n_batches)
            log.info("denoiser epoch %d loss %.5f", epoch, history[-1])
        self.net_.eval()
        self.trained_ = True
        self.metrics_ = {"train_loss": history}
        if Z_val is not None:
            self.metrics_["val_loss"] = self.validation_loss(Z_val)
        return self

    def validation_loss(self, Z, seed=1):
        """Mean denoising MSE over all timesteps on held-out latents."""
        Z = as_tensor(Z)
        gen = torch.Generator().manual_seed(seed)
        losses = []
        with torch.no_grad():
            for t in range(1, self.T + 1):
                eps = torch.randn(Z.shape, generator=gen)
                a = self.schedule_.alpha_bar(t)
                zt = math.sqrt(a) * Z + math.sqrt(1 - a) * eps
                pred = self.net_(zt, torch.full((len(Z),), t))
                losses.append(F.mse_loss(pred, eps).item())
        return float(np.mean(losses))

    def check_gate(self):
        """Raise :class:`TrainingGateError` unless the held-out loss is below ``max_val_loss``.

        Predicting zero noise scores 1.0, so the gate demands real learning.
        """
        val = self.metrics_.get("val_loss")
        if val is None:
            raise ContractError("denoiser gate needs a validation loss; pass Z_val to fit")
        if not val < self.max_val_loss:
            raise TrainingGateError("denoiser", "val_loss", val, self.max_val_loss)
        return self

    def predict_eps(self, z_t, t):
        """Predicted noise, same shape as ``z_t`` (batched). ``t`` is an int in [1, T]."""
        check_is_fitted(self, "net_")
        t = check_timestep(t, self.T)
        if tuple(z_t.shape[1:]) != tuple(self.latent_shape):
            raise ContractError(f"latent shape {tuple(z_t.shape[1:])} != {tuple(self.latent_shape)}")
        if torch.is_grad_enabled() and any(p.requires_grad for p in self.net_.parameters()):
            self.grad_calls_ += 1
        return self.net_(z_t, torch.full((z_t.shape[0],), t, dtype=torch.long))

    def parameters(self):
        return self.net_.parameters()

    def requires_grad_(self, flag):
        self.net_.requires_grad_(flag)
        return self

    def to(self, dtype):
        other = clone_weights(self)
        other.net_.to(dtype)
        return other

    def weights_sha256(self):
        return checkpoint.state_dict_sha256(self.net_.state_dict())

    def save(self, path):
        check_is_fitted(self, "net_")
        meta = {
            "params": {k: list(v) if isinstance(v, tuple) else v for k, v in self.get_params().items()},
            "architecture": {"unet_channels": [self.channels, 2 * self.channels], "t_dim": self.t_dim},
            "trained": self.trained_,
            "metrics": self.metrics_,
        }
        return checkpoint.save_checkpoint(path, "denoiser", self.net_.state_dict(), meta)

    @classmethod
    def load(cls, path, expected_sha256=None):
        state, meta = checkpoint.load_checkpoint(path, "denoiser", expected_sha256)
        params = dict(meta["params"])
        params["latent_shape"] = tuple(params["latent_shape"])
        model = cls(**params)._build()
        model.net_.load_state_dict(state)
        model.net_.eval()
        model.trained_ = meta["trained"]
        model.metrics_ = meta["metrics"]
        return model


class ZeroDenoiser:
    """Stub predicting zero noise."""

    def __init__(self, T):
        self.T = T

    def predict_eps(self, z_t, t):
        check_timestep(t, self.T)
        return torch.zeros_like(z_t)


class OracleDenoiser:
    """Stub returning a fixed noise tensor (the one actually injected)."""

    def __init__(self, eps, T):
        self.eps = eps
        self.T = T

    def predict_eps(self, z_t, t):
        check_timestep(t, self.T)
        return self.eps.to(z_t.dtype).expand_as(z_t)


def pretrain(dataset, schedule, epochs, seed, latent_shape=None, Z_val=None, **params):
    """Pre-train a denoiser on latents ``dataset`` under ``schedule`` (a linear one)."""
    Z = as_tensor(dataset)
    betas = schedule.betas
    model = DenoiserModel(
        latent_shape=tuple(latent_shape or Z.shape[1:]),
        T=schedule.T,
        beta_start=float(betas[0]),
        beta_end=float(betas[-1]),
        epochs=epochs,
        seed=seed,
        **params,
    )
    return model.fit(Z, Z_val=Z_val)


def clone_weights(model):
    """Independent deep copy; the gradient-call counter restarts at zero."""
    other = copy.deepcopy(model)
    if hasattr(other, "grad_calls_"):
        other.grad_calls_ = 0
    return other


def estimate_noise_bound(model, Z, schedule, inflate=1.5, seed=0):
    """Empirical max over latents and t of ||eps_hat||^2 / (1 - alpha_bar_t), times ``inflate``.

    This stands in for the constant C bounding the normalised noise prediction.
    """
    Z = as_tensor(Z)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for t in range(1, schedule.T + 1):
            a = schedule.alpha_bar(t)
            eps = torch.randn(Z.shape, generator=gen, dtype=Z.dtype)
            zt = math.sqrt(a) * Z + math.sqrt(1 - a) * eps
            pred = model.predict_eps(zt, t)
            val = pred.flatten(1).pow(2).sum(1).max().item() / (1 - a)
            worst = max(worst, val)
    if not math.isfinite(worst):
        raise NumericalFailure("noise prediction is not finite")
    return inflate * worst
