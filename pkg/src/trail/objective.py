"""Attack objective: adversarial term, distance term, their weighted sum, and the
latent guidance gradient derived from it."""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import torch

from trail._validation import ConfigurationError, ContractError, NumericalFailure

PROB_FLOOR = 1e-12
LOG_PROB_FLOOR = math.log(PROB_FLOOR)


@dataclass(frozen=True)
class ObjectiveConfig:
    alpha: float = 1.0
    beta: float = 100.0
    mode: str = "untargeted"
    target_label: int | None = None

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ConfigurationError("need alpha, beta >= 0 with alpha + beta > 0")
        if self.mode not in ("untargeted", "targeted"):
            raise ConfigurationError(f"unknown objective mode {self.mode!r}")
        if self.mode == "targeted" and self.target_label is None:
            raise ConfigurationError("targeted mode needs target_label")

    def to_dict(self):
        return asdict(self)


def _batch(x):
    return x.unsqueeze(0) if x.ndim == 3 else x


def _labels(y, n, device=None):
    y = torch.as_tensor(y, dtype=torch.long, device=device).reshape(-1)
    if y.numel() == 1 and n > 1:
        y = y.expand(n)
    return y


def adversarial_loss_per_sample(clf, x_hat, y, cfg):
    x_hat = _batch(x_hat)
    logp = clf.log_proba(x_hat)
    k = logp.shape[1]
    y = _labels(y, len(x_hat), logp.device)
    if y.numel() and (y.min() < 0 or y.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    # log p with probability floored at 1e-12
    logp = logp.clamp(min=LOG_PROB_FLOOR)
    if cfg.mode == "targeted":
        target = _labels(cfg.target_label, len(x_hat), logp.device)
        if torch.any(target == y):
            raise ConfigurationError("target_label must differ from the true label")
        return -logp.gather(1, target[:, None])[:, 0]
    return logp.gather(1, y[:, None])[:, 0]


def distance_loss_per_sample(x, x_hat):
    x, x_hat = _batch(x), _batch(x_hat)
    if x.shape != x_hat.shape:
        raise ContractError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).pow(2).flatten(1).mean(1)


def total_objective_per_sample(x, x_hat, y, clf, cfg):
    total = 0.0
    if cfg.alpha:
        total = total + cfg.alpha * adversarial_loss_per_sample(clf, x_hat, y, cfg)
    if cfg.beta:
        total = total + cfg.beta * distance_loss_per_sample(x, x_hat)
    return total


def adversarial_loss(clf, x_hat, y, cfg=ObjectiveConfig()):
    """Untargeted: ``log p(y | x_hat)`` (negative cross-entropy, <= 0). Targeted:
    cross-entropy towards ``cfg.target_label``. Batch mean."""
    return adversarial_loss_per_sample(clf, x_hat, y, cfg).mean()


def distance_loss(x, x_hat):
    """Mean squared pixel error."""
    return distance_loss_per_sample(x, x_hat).mean()


def total_objective(x, x_hat, y, clf, cfg):
    """``alpha * adversarial_loss + beta * distance_loss``."""
    return adversarial_loss(clf, x_hat, y, cfg) * cfg.alpha + distance_loss(x, x_hat) * cfg.beta


@contextmanager
def frozen(*modules):
    """Temporarily stop autograd from recording the parameters of ``modules``."""
    saved = []
    for m in modules:
        if hasattr(m, "parameters"):
            params = list(m.parameters())
            saved.append((params, [p.requires_grad for p in params]))
            for p in params:
                p.requires_grad_(False)
    try:
        yield
    finally:
        for params, flags in saved:
            for p, f in zip(params, flags):
                p.requires_grad_(f)


def guidance_with_value(model, codec, clf, z_t, t, x, y, cfg, scale, schedule):
    """``(G_t, objective value)``; see :func:`guidance_gradient`."""
    from trail.sampler import predict_x0

    data = z_t.data if hasattr(z_t, "data") and not isinstance(z_t, torch.Tensor) else z_t
    if scale == 0:
        return torch.zeros_like(data), None
    with torch.enable_grad(), frozen(model):
        z = data.detach().requires_grad_(True)
        z0 = predict_x0(model, z, t, schedule).data
        x_hat = codec.decode(z0)
        value = total_objective_per_sample(_batch(x).to(x_hat.dtype), x_hat, y, clf, cfg).sum()
        (grad,) = torch.autograd.grad(value, z)
    if not torch.isfinite(grad).all():
        raise NumericalFailure(f"non-finite guidance gradient at t={t}", where=t)
    return -scale * grad, float(value.detach())


def guidance_gradient(model, codec, clf, z_t, t, x, y, cfg, scale, schedule):
    """Guidance ``G_t = -scale * d/dz_t objective(x, decode(predict_x0(z_t, t)), y)``.

    The negative sign makes the shifted reverse mean descend the objective.
    Per-sample objectives are summed so each sample's gradient is independent
    of the batch it sits in.
    """
    return guidance_with_value(model, codec, clf, z_t, t, x, y, cfg, scale, schedule)[0]
