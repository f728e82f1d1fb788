"""Image <-> latent codec: a small convolutional VAE, or an identity passthrough."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn
from torch.nn import functional as F

from trail import checkpoint
from trail._validation import ConfigurationError, ContractError, TrainingGateError, check_images

log = logging.getLogger(__name__)

IMAGE_SHAPE = (3, 32, 32)
MODES = ("vae", "identity")


@dataclass
class LatentState:
    """A latent tensor tagged with its diffusion timestep (0 = clean)."""

    data: torch.Tensor
    t: int = 0
    provenance: str = "encoded"

    @property
    def d_z(self):
        """Elements per sample (leading batch dim excluded)."""
        return int(np.prod(self.data.shape[1:]))

    def with_data(self, data, t, provenance):
        return LatentState(data, t, provenance)


class _Encoder(nn.Module):
    def __init__(self, width, latent_channels, channels=3):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * width, 2 * latent_channels, 3, padding=1),
        )
        # start with a narrow posterior so early decoder training sees signal, not noise
        with torch.no_grad():
            self.body[-1].bias[latent_channels:].fill_(-8.0)

    def forward(self, x):
        mu, logvar = self.body(x).chunk(2, dim=1)
        return mu, logvar.clamp(-20, 10)


class _Decoder(nn.Module):
    def __init__(self, width, latent_channels, channels=3):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(latent_channels, 2 * width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(2 * width, width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, channels, 3, padding=1),
        )

    def forward(self, z):
        return self.body(z)


class LatentCodec(BaseEstimator, TransformerMixin):
    """Deterministic encoder / clamping decoder pair.

    ``transform`` encodes to the standardised posterior mean, and
    ``inverse_transform`` decodes. Latents are shifted and scaled per channel
    after training so the encoded data is close to zero mean, unit variance.
    The torch-level :meth:`encode` / :meth:`decode` are what the diffusion
    code uses; ``decode`` stays differentiable.
    """

    def __init__(
        self,
        mode="vae",
        latent_channels=4,
        width=32,
        epochs=20,
        batch_size=64,
        lr=2e-3,
        kl_weight=1e-4,
        seed=0,
        max_abs_error=0.1,
        min_ssim=0.8,
        image_shape=IMAGE_SHAPE,
    ):
        self.mode = mode
        self.latent_channels = latent_channels
        self.width = width
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.kl_weight = kl_weight
        self.seed = seed
        self.max_abs_error = max_abs_error
        self.min_ssim = min_ssim
        self.image_shape = image_shape

    @property
    def _shape(self):
        return tuple(self.image_shape)

    # -- construction -------------------------------------------------
    def _build(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"codec mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "identity":
            self.encoder_ = self.decoder_ = None
            self.latent_shape_ = self._shape
            self.shift_ = torch.zeros(self._shape[0], 1, 1)
            self.scale_ = torch.ones(self._shape[0], 1, 1)
            return
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            self.encoder_ = _Encoder(self.width, self.latent_channels, self._shape[0])
            self.decoder_ = _Decoder(self.width, self.latent_channels, self._shape[0])
        self.latent_shape_ = (self.latent_channels, self._shape[1] // 2, self._shape[2] // 2)
        self.shift_ = torch.zeros(self.latent_channels, 1, 1)
        self.scale_ = torch.ones(self.latent_channels, 1, 1)

    def fit(self, X, y=None, X_val=None):
        """Train the VAE on images ``X``; identity mode skips training."""
        X = check_images(X, self._shape)
        if len(X) == 0:
            raise ContractError("cannot train a codec on an empty dataset")
        self._build()
        self.metrics_ = {}
        if self.mode == "identity":
            self.eps_recon_ = 0.0
            return self

        gen = torch.Generator().manual_seed(self.seed)
        params = list(self.encoder_.parameters()) + list(self.decoder_.parameters())
        opt = torch.optim.Adam(params, lr=self.lr)
        n_batches = max(1, len(X) // self.batch_size)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, self.epochs * n_batches))
        history = []
        for epoch in range(self.epochs):
            perm = torch.randperm(len(X), generator=gen)
            total = 0.0
            for b in range(n_batches):
                xb = X[perm[b * self.batch_size : (b + 1) * self.batch_size]]
                mu, logvar = self.encoder_(xb)
                z = mu + torch.randn(mu.shape, generator=gen) * (0.5 * logvar).exp()
                recon = self.decoder_(z)
                rec = F.mse_loss(recon, xb)
                kl = 0.5 * (mu.pow(2) + logvar.exp() - 1 - logvar).mean()
                loss = rec + self.kl_weight * kl
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
                total += loss.item()
            history.append(total / n_batches)
            log.info("codec epoch %d loss %.5f", epoch, history[-1])
        self.encoder_.eval()
        self.decoder_.eval()

        with torch.no_grad():
            mu = torch.cat([self.encoder_(X[i : i + 256])[0] for i in range(0, len(X), 256)])
            self.shift_ = mu.mean(dim=(0, 2, 3)).reshape(-1, 1, 1)
            self.scale_ = mu.std(dim=(0, 2, 3)).reshape(-1, 1, 1)

        X_val = X if X_val is None else check_images(X_val, self._shape)
        self.metrics_ = {"train_loss": history, **self.reconstruction_metrics(X_val)}
        self.eps_recon_ = self.metrics_["mean_abs_error"]
        return self

    def reconstruction_metrics(self, X):
        from trail.evaluation.metrics import ssim

        X = check_images(X, self._shape)
        with torch.no_grad():
            R = torch.cat([self.decode(self.encode(X[i : i + 256])) for i in range(0, len(X), 256)])
        return {
            "mean_abs_error": float((R - X).abs().mean()),
            "ssim": float(np.mean([ssim(a, b) for a, b in zip(X, R)])),
        }

    def check_gate(self):
        """Raise :class:`TrainingGateError` if reconstruction quality is below the gate."""
        check_is_fitted(self, "latent_shape_")
        if self.mode == "identity":
            return
        if self.metrics_["mean_abs_error"] >= self.max_abs_error:
            raise TrainingGateError("codec", "mean_abs_error", self.metrics_["mean_abs_error"], self.max_abs_error)
        if self.metrics_["ssim"] <= self.min_ssim:
            raise TrainingGateError("codec", "ssim", self.metrics_["ssim"], self.min_ssim)

    # -- torch-level map -------------------------------------------------
    @property
    def d_z(self):
        return int(np.prod(self.latent_shape_))

    def encode(self, x):
        """Posterior mean of ``x`` (batched tensor), standardised."""
        check_is_fitted(self, "latent_shape_")
        if tuple(x.shape[1:]) != self._shape:
            raise ContractError(f"image shape {tuple(x.shape[1:])} != {self._shape}")
        if self.mode == "identity":
            return x.clone()
        mu, _ = self.encoder_(x.to(self._dtype()))
        return (mu - self.shift_) / self.scale_

    def decode(self, z):
        """Image in [0, 1]; differentiable in ``z``."""
        check_is_fitted(self, "latent_shape_")
        if isinstance(z, LatentState):
            z = z.data
        if tuple(z.shape[1:]) != tuple(self.latent_shape_):
            raise ContractError(f"latent shape {tuple(z.shape[1:])} != {self.latent_shape_}")
        if self.mode == "identity":
            return z.clamp(0, 1)
        return self.decoder_(z * self.scale_ + self.shift_).clamp(0, 1)

    def encode_state(self, x):
        return LatentState(self.encode(x), 0, "encoded")

    def _dtype(self):
        return self.shift_.dtype

    def to(self, dtype):
        """Copy of the codec in ``dtype`` (e.g. ``torch.float64`` for gradient checks)."""
        other = copy.deepcopy(self)
        for name in ("encoder_", "decoder_"):
            mod = getattr(other, name)
            if mod is not None:
                mod.to(dtype)
        other.shift_ = other.shift_.to(dtype)
        other.scale_ = other.scale_.to(dtype)
        return other

    def requires_grad_(self, flag=False):
        for mod in (self.encoder_, self.decoder_):
            if mod is not None:
                mod.requires_grad_(flag)
        return self

    # -- sklearn surface ---------------------------------------------------
    def transform(self, X):
        X = check_images(X, self._shape)
        with torch.no_grad():
            return self.encode(X).numpy()

    def inverse_transform(self, Z):
        Z = torch.as_tensor(np.asarray(Z), dtype=self._dtype())
        with torch.no_grad():
            return self.decode(Z).numpy()

    # -- persistence -------------------------------------------------------
    def state_dict(self):
        state = {"shift": self.shift_, "scale": self.scale_}
        if self.mode == "vae":
            state.update({f"encoder.{k}": v for k, v in self.encoder_.state_dict().items()})
            state.update({f"decoder.{k}": v for k, v in self.decoder_.state_dict().items()})
        return state

    def save(self, path):
        check_is_fitted(self, "latent_shape_")
        meta = {
            "params": {k: list(v) if isinstance(v, tuple) else v for k, v in self.get_params().items()},
            "latent_shape": list(self.latent_shape_),
            "image_shape": list(self._shape),
            "metrics": self.metrics_,
            "eps_recon": self.eps_recon_,
        }
        return checkpoint.save_checkpoint(path, "codec", self.state_dict(), meta)

    @classmethod
    def load(cls, path, expected_sha256=None):
        state, meta = checkpoint.load_checkpoint(path, "codec", expected_sha256)
        codec = cls(**meta["params"])
        codec._build()
        if tuple(meta["latent_shape"]) != tuple(codec.latent_shape_):
            raise checkpoint.CheckpointError("latent shape header does not match parameters")
        codec.shift_ = state.pop("shift")
        codec.scale_ = state.pop("scale")
        if codec.mode == "vae":
            codec.encoder_.load_state_dict({k[8:]: v for k, v in state.items() if k.startswith("encoder.")})
            codec.decoder_.load_state_dict({k[8:]: v for k, v in state.items() if k.startswith("decoder.")})
            codec.encoder_.eval()
            codec.decoder_.eval()
        codec.metrics_ = meta["metrics"]
        codec.eps_recon_ = meta["eps_recon"]
        return codec


def identity_codec(image_shape=IMAGE_SHAPE):
    """Pixel-space codec: encode copies, decode clamps to [0, 1]."""
    codec = LatentCodec(mode="identity", image_shape=tuple(image_shape))
    codec._build()
    codec.metrics_ = {}
    codec.eps_recon_ = 0.0
    return codec


def encode(codec, x):
    """Encode a single image (C, H, W) or a batch to a :class:`LatentState` at t=0."""
    single = x.ndim == 3
    z = codec.encode(x.unsqueeze(0) if single else x)
    return LatentState(z[0] if single else z, 0, "encoded")


def decode(codec, z):
    data = z.data if isinstance(z, LatentState) else z
    single = data.ndim == 3
    out = codec.decode(data.unsqueeze(0) if single else data)
    return out[0] if single else out


def train_codec(dataset, epochs, seed, mode="vae", X_val=None, **params):
    """Train a codec on ``dataset`` (images) and enforce the reconstruction gate."""
    if mode == "identity":
        return identity_codec()
    X = dataset[0] if isinstance(dataset, tuple) else dataset
    if len(X) == 0:
        raise ContractError("cannot train a codec on an empty dataset")
    codec = LatentCodec(mode=mode, epochs=epochs, seed=seed, **params).fit(X, X_val=X_val)
    codec.check_gate()
    return codec
