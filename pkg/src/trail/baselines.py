"""L-infinity PGD / FGSM: the optimisation-based attacks used for comparison."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from torch.nn import functional as F

from trail._validation import ConfigurationError, check_images, check_labels


@dataclass(frozen=True)
class PGDConfig:
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 10
    random_start: bool = False
    seed: int = 0
    targeted: bool = False
    target_label: int | None = None

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be >= 0")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.epsilon > 0 and not 0 < self.step_size <= self.epsilon:
            raise ConfigurationError("need 0 < step_size <= epsilon")
        if self.targeted and self.target_label is None:
            raise ConfigurationError("targeted PGD needs target_label")

    def to_dict(self):
        return asdict(self)


def pgd_attack(clf, x, y, cfg):
    """Projected sign-gradient ascent on cross-entropy (descent towards the target
    when targeted), kept within ``epsilon`` of ``x`` in L-inf and inside [0, 1].

    ``x`` is a single image or a batch; ``y`` matching labels.
    """
    single = x.ndim == 3
    x = check_images(x)
    y = check_labels(y, len(x))
    if cfg.epsilon == 0:
        return (x[0] if single else x).clone()
    gen = torch.Generator().manual_seed(cfg.seed)
    x_adv = x.clone()
    if cfg.random_start:
        x_adv = x_adv + (torch.rand(x.shape, generator=gen) * 2 - 1) * cfg.epsilon
        x_adv = x_adv.clamp(0, 1)
    goal = torch.full_like(y, cfg.target_label) if cfg.targeted else y
    sign = -1.0 if cfg.targeted else 1.0
    for _ in range(cfg.steps):
        x_adv = x_adv.detach().requires_grad_(True)
        with torch.enable_grad():
            loss = F.nll_loss(clf.log_proba(x_adv), goal, reduction="sum")
            (grad,) = torch.autograd.grad(loss, x_adv)
        with torch.no_grad():
            x_adv = x_adv + sign * cfg.step_size * grad.sign()
            x_adv = torch.min(torch.max(x_adv, x - cfg.epsilon), x + cfg.epsilon).clamp(0, 1)
    x_adv = x_adv.detach()
    return x_adv[0] if single else x_adv


def fgsm_attack(clf, x, y, epsilon):
    """Single-step PGD from the clean point."""
    return pgd_attack(clf, x, y, PGDConfig(epsilon=epsilon, step_size=epsilon, steps=1))


class PGDAttack(BaseEstimator, TransformerMixin):
    """Estimator wrapper: ``transform(X, y)`` returns adversarial images as numpy."""

    def __init__(self, surrogate=None, epsilon=8 / 255, step_size=None, steps=10, random_start=False, seed=0, batch_size=50):
        self.surrogate = surrogate
        self.epsilon = epsilon
        self.step_size = step_size
        self.steps = steps
        self.random_start = random_start
        self.seed = seed
        self.batch_size = batch_size

    def config(self):
        step = self.step_size if self.step_size is not None else max(self.epsilon / 4, 1e-12)
        step = min(step, self.epsilon) if self.epsilon > 0 else step
        return PGDConfig(self.epsilon, step, self.steps, self.random_start, self.seed)

    def fit(self, X=None, y=None):
        return self

    def transform(self, X, y):
        X = check_images(X)
        y = check_labels(y, len(X))
        cfg = self.config()
        out = [pgd_attack(self.surrogate, X[i : i + self.batch_size], y[i : i + self.batch_size], cfg) for i in range(0, len(X), self.batch_size)]
        return torch.cat(out).numpy()


def match_ssim_epsilon(clf, X, y, target_ssim, steps=10, lo=0.0, hi=32 / 255, iters=12, quantize=True):
    """Bisect the PGD epsilon whose mean SSIM to ``X`` equals ``target_ssim``.

    Step size is ``epsilon / 4``. Returns ``(epsilon, achieved mean SSIM)``.
    """
    from trail.data import quantize as q
    from trail.evaluation.metrics import mean_ssim

    X = check_images(X)

    def measure(eps):
        if eps == 0:
            return 1.0
        adv = PGDAttack(clf, epsilon=eps, steps=steps).transform(X, y)
        if quantize:
            adv = q(adv)
        return mean_ssim(X.numpy(), adv)

    best = (hi, measure(hi))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        s = measure(mid)
        if abs(s - target_ssim) < abs(best[1] - target_ssim):
            best = (mid, s)
        # SSIM falls as epsilon grows
        if s > target_ssim:
            lo = mid
        else:
            hi = mid
    return float(best[0]), float(best[1])
