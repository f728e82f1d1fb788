"""Monte-Carlo check of the high-probability bound on latent drift after
noising to t* and denoising back.

For ``sigma^2 = 1 - alpha_bar(t*)`` the bound reads::

    ||z - z_0(t*)||^2 <= sigma^2 (C sigma^2 + d + 2 sqrt(-d log delta) - 2 log delta)

with probability at least ``1 - delta``, where C bounds
``||eps_hat||^2 / (1 - alpha_bar_t)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from trail._validation import ConfigurationError, ContractError, as_tensor
from trail.codec import LatentState
from trail.denoiser import estimate_noise_bound
from trail.sampler import forward_diffuse, reverse_step
from trail.schedule import sigma_sq


@dataclass(frozen=True)
class BoundParams:
    C: float
    d_z: int
    delta: float
    sigma_sq_tstar: float

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ConfigurationError(f"delta must lie in (0, 1), got {self.delta}")
        if self.C < 0 or self.d_z < 1 or self.sigma_sq_tstar < 0:
            raise ConfigurationError("need C >= 0, d_z >= 1, sigma_sq >= 0")


def bound_rhs(p):
    s2, d, log_d = p.sigma_sq_tstar, p.d_z, math.log(p.delta)
    return s2 * (p.C * s2 + d + 2 * math.sqrt(-d * log_d) - 2 * log_d)


def drift_samples(model, z, t_star, schedule, generator):
    """``||z - z_0(t*)||^2`` for each row of ``z`` after noising to ``t_star`` and
    running the unguided reverse chain."""
    zt, _ = forward_diffuse(LatentState(z), t_star, schedule, generator)
    for t in range(t_star, 0, -1):
        zt = reverse_step(model, zt, t, schedule, generator)
    return (z - zt.data).flatten(1).pow(2).sum(1)


def verify_bound(model, codec, schedule, X, t_stars, delta=0.1, trials=200, C=None, inflate=1.5, seed=0, batch_size=100):
    """Empirical violation rate of the bound at each ``t*``.

    Trial ``k`` uses image ``k mod len(X)`` with fresh noise. PASS iff the
    violation rate is at most ``delta`` for every ``t*``.
    """
    if trials < 1:
        raise ContractError("trials must be >= 1")
    if not getattr(model, "trained_", True):
        raise ContractError("bound verification needs a trained denoiser")
    X = as_tensor(X)
    with torch.no_grad():
        Z = torch.cat([codec.encode(X[i : i + 256]) for i in range(0, len(X), 256)])
    d_z = int(np.prod(Z.shape[1:]))
    if C is None:
        C = estimate_noise_bound(model, Z, schedule, inflate=inflate, seed=seed)

    gen = torch.Generator().manual_seed(seed)
    idx = torch.arange(trials) % len(Z)
    rows = []
    for t_star in t_stars:
        s2 = sigma_sq(schedule, t_star)
        rhs = bound_rhs(BoundParams(C, d_z, delta, s2))
        dist = torch.cat(
            [drift_samples(model, Z[idx[i : i + batch_size]], t_star, schedule, gen) for i in range(0, trials, batch_size)]
        ).double()
        violations = int((dist > rhs).sum())
        rows.append(
            {
                "t_star": int(t_star),
                "sigma_sq": s2,
                "bound": rhs,
                "mean_sq_drift": float(dist.mean()),
                "max_sq_drift": float(dist.max()),
                "violations": violations,
                "violation_rate": violations / trials,
                "pass": violations / trials <= delta,
            }
        )
    return {
        "C": C,
        "d_z": d_z,
        "delta": delta,
        "trials": trials,
        "codec_mode": getattr(codec, "mode", "unknown"),
        "rows": rows,
        "pass": all(r["pass"] for r in rows),
    }
