"""Per-image test-time adaptation of the denoiser, and the full attack estimator."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from trail._validation import ConfigurationError, NumericalFailure, check_images, check_labels, check_timestep
from trail.codec import LatentState
from trail.denoiser import clone_weights
from trail.objective import ObjectiveConfig, adversarial_loss_per_sample, distance_loss_per_sample, frozen
from trail.sampler import denoise_from, forward_diffuse, predict_x0, reconstruct

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class TTAConfig:
    iterations: int = 100
    learning_rate: float = 1e-5
    t_star: int = 8
    t_r_sampling: str = "uniform_1_to_tstar"
    optimizer: str = "adam"
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    guidance_scale_tta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("TTA needs at least one iteration")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if self.t_star < 1:
            raise ConfigurationError("t_star must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}")
        if self.t_r_sampling != "uniform_1_to_tstar":
            raise ConfigurationError(f"unsupported t_r sampling {self.t_r_sampling!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class TTARecord:
    iteration: int
    t_r: int
    l_adv: float
    l_dis: float
    total: float
    grad_norm: float
    update_norm: float


@dataclass
class TTATrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(TTARecord.__dataclass_fields__))
            writer.writeheader()
            for r in self.records:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(r).items()})


def sample_t_r(cfg, rng):
    """Uniform draw from {1, ..., t_star}."""
    return int(torch.randint(1, cfg.t_star + 1, (1,), generator=rng).item())


def _make_optimizer(cfg, params):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate, foreach=False)
    return torch.optim.SGD(params, lr=cfg.learning_rate, foreach=False)


def adapt(pretrained, codec, surrogate, x, y, schedule, cfg, rng=None):
    """Adapt a clone of ``pretrained`` to the attack objective on image ``x``.

    Each iteration noises ``encode(x)`` to ``t_star``, runs guided denoising
    without parameter gradients down to a random ``t_r``, predicts the clean
    latent in one step from there, and takes one optimiser step on the
    objective of its decoding. ``pretrained`` is never modified.
    """
    check_timestep(cfg.t_star, schedule.T)
    rng = rng if rng is not None else torch.Generator().manual_seed(cfg.seed)
    model = clone_weights(pretrained)
    model.requires_grad_(True)
    params = [p for p in model.parameters()]
    opt = _make_optimizer(cfg, params)
    xb = x.unsqueeze(0) if x.ndim == 3 else x
    obj = cfg.objective
    with torch.no_grad():
        z0 = LatentState(codec.encode(xb), 0, "encoded")

    trace = TTATrace()
    for it in range(cfg.iterations):
        z, _ = forward_diffuse(z0, cfg.t_star, schedule, rng)
        t_r = sample_t_r(cfg, rng)
        with frozen(model):
            z = denoise_from(model, codec, surrogate, z, cfg.t_star, t_r, schedule, xb, y, obj, cfg.guidance_scale_tta, rng)
        z_tr = z.data.detach()

        with torch.enable_grad():
            z_hat = predict_x0(model, z_tr, t_r, schedule).data
            x_hat = codec.decode(z_hat)
            l_adv = adversarial_loss_per_sample(surrogate, x_hat, y, obj).sum()
            l_dis = distance_loss_per_sample(xb.to(x_hat.dtype), x_hat).sum()
            loss = obj.alpha * l_adv + obj.beta * l_dis
            if not torch.isfinite(loss):
                raise NumericalFailure(f"non-finite TTA loss at iteration {it}", where=it)
            opt.zero_grad()
            loss.backward()
        grads = [p.grad for p in params if p.grad is not None]
        grad_norm = math.sqrt(sum(float(g.pow(2).sum()) for g in grads))
        if not math.isfinite(grad_norm):
            raise NumericalFailure(f"non-finite TTA gradient at iteration {it}", where=it)
        before = [p.detach().clone() for p in params]
        opt.step()
        update_norm = math.sqrt(sum(float((p.detach() - b).pow(2).sum()) for p, b in zip(params, before)))
        trace.records.append(
            TTARecord(it, t_r, l_adv.item(), l_dis.item(), loss.item(), grad_norm, update_norm)
        )
    model.requires_grad_(False)
    return model, trace


def image_seeds(seed, index):
    """Independent (adaptation, generation) seeds for image ``index``."""
    a, b = np.random.SeedSequence([int(seed), int(index)]).generate_state(2)
    return int(a), int(b)


class TrailAttack(BaseEstimator, TransformerMixin):
    """Adversarial image generation by per-image adaptation plus guided reconstruction.

    ``transform(X, y)`` returns adversarial images. Setting
    ``learning_rate=0`` and both guidance scales to 0 reduces to plain
    noise-and-denoise reconstruction. Per-image randomness depends only on
    ``seed`` and the image index, so results do not depend on batching.
    """

    def __init__(
        self,
        denoiser=None,
        codec=None,
        surrogate=None,
        t_star=8,
        iterations=100,
        learning_rate=1e-5,
        optimizer="adam",
        alpha=1.0,
        beta=100.0,
        guidance_scale_tta=1.0,
        guidance_scale=1.0,
        run_tta=True,
        seed=0,
    ):
        self.denoiser = denoiser
        self.codec = codec
        self.surrogate = surrogate
        self.t_star = t_star
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.alpha = alpha
        self.beta = beta
        self.guidance_scale_tta = guidance_scale_tta
        self.guidance_scale = guidance_scale
        self.run_tta = run_tta
        self.seed = seed

    def tta_config(self):
        return TTAConfig(
            iterations=self.iterations,
            learning_rate=self.learning_rate,
            t_star=self.t_star,
            optimizer=self.optimizer,
            objective=ObjectiveConfig(self.alpha, self.beta),
            guidance_scale_tta=self.guidance_scale_tta,
            seed=self.seed,
        )

    def fit(self, X=None, y=None):
        return self

    def attack_one(self, x, y, index):
        """Returns ``(adversarial image, TTATrace or None)`` for one image."""
        schedule = self.denoiser.schedule_
        cfg = self.tta_config()
        seed_tta, seed_gen = image_seeds(self.seed, index)
        model, trace = self.denoiser, None
        if self.run_tta:
            model, trace = adapt(self.denoiser, self.codec, self.surrogate, x, y, schedule, cfg, torch.Generator().manual_seed(seed_tta))
        gen = torch.Generator().manual_seed(seed_gen)
        x_adv = reconstruct(model, self.codec, self.surrogate, x, y, cfg.objective, self.t_star, schedule, self.guidance_scale, gen)
        return x_adv.detach(), trace

    def transform(self, X, y, indices=None):
        X = check_images(X)
        y = check_labels(y, len(X))
        indices = range(len(X)) if indices is None else indices
        out = [self.attack_one(x, int(t), int(i))[0] for x, t, i in zip(X, y, indices)]
        return torch.stack(out).numpy()
