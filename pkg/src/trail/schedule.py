"""Discrete DDPM noise schedule.

Timesteps are 1-based: ``t = 1..T`` index the noising steps and ``t = 0``
denotes the clean signal. All quantities are float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from trail._validation import ConfigurationError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_variances: np.ndarray

    @property
    def T(self):
        return len(self.betas)

    @classmethod
    def from_betas(cls, betas):
        betas = np.asarray(betas, dtype=np.float64).reshape(-1)
        if betas.size == 0:
            raise ConfigurationError("schedule needs at least one step")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ConfigurationError("betas must lie strictly inside (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        # constant-variance reverse process; the last step (t=1) is noiseless
        posterior = betas.copy()
        posterior[0] = 0.0
        for arr in (betas, alphas, alpha_bars, posterior):
            arr.setflags(write=False)
        return cls(betas, alphas, alpha_bars, posterior)

    def _index(self, t):
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside [1, {self.T}]")
        return t - 1

    def beta(self, t):
        return float(self.betas[self._index(t)])

    def alpha(self, t):
        return float(self.alphas[self._index(t)])

    def alpha_bar(self, t):
        """Cumulative signal retention; ``alpha_bar(0) == 1``."""
        if t == 0:
            return 1.0
        return float(self.alpha_bars[self._index(t)])

    def posterior_variance(self, t):
        return float(self.posterior_variances[self._index(t)])

    def to_dict(self):
        return {"betas": self.betas.tolist()}


def build_linear_schedule(T, beta_start=1e-4, beta_end=0.02):
    """Betas linearly spaced from ``beta_start`` to ``beta_end`` inclusive."""
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigurationError(f"T must be a positive integer, got {T!r}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def sigma_sq(schedule, t):
    """Accumulated forward noise variance ``1 - alpha_bar(t)``."""
    if not 1 <= t <= schedule.T:
        raise IndexError(f"timestep {t} outside [1, {schedule.T}]")
    return 1.0 - schedule.alpha_bar(t)
