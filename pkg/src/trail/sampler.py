"""Diffusion-time dynamics: forward noising, one-step x0 prediction, plain and
guided reverse steps, and the noise-then-denoise reconstruction.

Latents are batched tensors wrapped in :class:`~trail.codec.LatentState`.
Randomness comes only from the ``generator`` argument.
"""

from __future__ import annotations

import math

import torch

from trail._validation import check_timestep
from trail.codec import LatentState
from trail.objective import guidance_with_value


def _data(z):
    return z.data if isinstance(z, LatentState) else z


def _randn(like, generator):
    return torch.randn(like.shape, generator=generator, dtype=like.dtype, device=like.device)


def forward_diffuse(z0, t, schedule, generator):
    """Sample ``z_t ~ q(z_t | z_0)`` in closed form. Returns ``(state, eps)``."""
    t = check_timestep(t, schedule.T)
    data = _data(z0)
    eps = _randn(data, generator)
    ab = schedule.alpha_bar(t)
    zt = math.sqrt(ab) * data + math.sqrt(1.0 - ab) * eps
    return LatentState(zt, t, "noised"), eps


def predict_x0(model, z_t, t, schedule):
    """Mean of the one-step clean prediction from ``z_t``."""
    t = check_timestep(t, schedule.T)
    data = _data(z_t)
    ab = schedule.alpha_bar(t)
    eps = model.predict_eps(data, t)
    z0 = data / math.sqrt(ab) - math.sqrt((1.0 - ab) / ab) * eps
    return LatentState(z0, 0, "predicted")


def reverse_mean(model, z_t, t, schedule):
    data = _data(z_t)
    beta = schedule.beta(t)
    eps = model.predict_eps(data, t)
    coef = beta / math.sqrt(1.0 - schedule.alpha_bar(t))
    return (data - coef * eps) / math.sqrt(schedule.alpha(t))


def _step(mean, t, schedule, generator):
    var = schedule.posterior_variance(t)
    if t > 1:
        return mean + math.sqrt(var) * _randn(mean, generator)
    return mean


def reverse_step(model, z_t, t, schedule, generator):
    """One ancestral step ``z_t -> z_{t-1}``; the step from t=1 adds no noise."""
    t = check_timestep(t, schedule.T)
    with torch.no_grad():
        mean = reverse_mean(model, z_t, t, schedule)
        return LatentState(_step(mean, t, schedule, generator), t - 1, "denoised")


def guided_reverse_step(model, codec, clf, z_t, t, schedule, x, y, cfg, scale, generator, trace=None):
    """Reverse step with the mean shifted by ``variance_t * G_t``.

    With ``scale == 0`` this is bit-identical to :func:`reverse_step` under
    the same generator state. ``trace`` (a list) receives ``(t, objective, |G_t|)``.
    """
    t = check_timestep(t, schedule.T)
    guidance, value = guidance_with_value(model, codec, clf, z_t, t, x, y, cfg, scale, schedule)
    with torch.no_grad():
        mean = reverse_mean(model, z_t, t, schedule)
        if scale != 0:
            mean = mean + schedule.posterior_variance(t) * guidance
        out = _step(mean, t, schedule, generator)
    if trace is not None:
        trace.append((t, value, float(guidance.norm())))
    return LatentState(out, t - 1, "denoised")


def denoise_from(model, codec, clf, z, t_from, t_to, schedule, x, y, cfg, scale, generator, trace=None):
    """Run guided reverse steps from ``t_from`` down to ``t_to`` (exclusive of further steps)."""
    for t in range(t_from, t_to, -1):
        if scale == 0:
            z = reverse_step(model, z, t, schedule, generator)
        else:
            z = guided_reverse_step(model, codec, clf, z, t, schedule, x, y, cfg, scale, generator, trace)
    return z


def reconstruct(model, codec, clf, x, y, cfg, t_star, schedule, scale, generator, trace=None):
    """Encode ``x``, noise it to ``t_star``, denoise back to 0 with guidance, decode."""
    t_star = check_timestep(t_star, schedule.T)
    single = x.ndim == 3
    xb = x.unsqueeze(0) if single else x
    with torch.no_grad():
        z0 = LatentState(codec.encode(xb), 0, "encoded")
    z, _ = forward_diffuse(z0, t_star, schedule, generator)
    z = denoise_from(model, codec, clf, z, t_star, 0, schedule, xb, y, cfg, scale, generator, trace)
    with torch.no_grad():
        out = codec.decode(z.data)
    return out[0] if single else out
