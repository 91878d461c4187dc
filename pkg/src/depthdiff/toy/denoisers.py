"""Analytic denoisers whose optimal outputs are known in closed form."""

from __future__ import annotations

import numpy as np

from ..schedule import DiffusionSchedule, Parameterization


def emit(x_t: np.ndarray, x0: np.ndarray, t: int, schedule: DiffusionSchedule, param: Parameterization) -> np.ndarray:
    """Express a clean-sample estimate as a model output under ``param``."""
    if param is Parameterization.X0:
        return np.array(x0, dtype=np.float64)
    a, b = schedule.signal_noise(t)
    if b == 0.0:
        raise ZeroDivisionError("noise estimate undefined at abar = 1")
    eps = (x_t - a * x0) / b
    if param is Parameterization.EPSILON:
        return eps
    return a * eps - b * x0


class PointMassDenoiser:
    """Exact denoiser for data concentrated on a single field ``x_star``.

    The posterior mean of a point mass is the point itself, so the implied
    clean estimate is ``x_star`` for every input.
    """

    def __init__(self, x_star, schedule: DiffusionSchedule, parameterization="epsilon", cond_channels: int = 3):
        self.x_star = np.asarray(getattr(x_star, "values", x_star), dtype=np.float64)
        if self.x_star.ndim == 2:
            self.x_star = self.x_star[None]
        self.schedule = schedule
        self.parameterization = Parameterization(parameterization)
        self.latent_channels = self.x_star.shape[0]
        self.cond_channels = cond_channels

    def __call__(self, noisy: np.ndarray, cond: np.ndarray, t: int) -> np.ndarray:
        if noisy.shape != self.x_star.shape:
            raise ValueError(f"point-mass target has shape {self.x_star.shape}, input {noisy.shape}")
        return emit(noisy, self.x_star, t, self.schedule, self.parameterization)


class GaussianDenoiser:
    """Posterior-mean denoiser for data drawn from ``N(mean, var * I)``."""

    def __init__(self, mean, var: float, schedule: DiffusionSchedule, parameterization="epsilon",
                 latent_channels: int = 1, cond_channels: int = 3):
        if var <= 0:
            raise ValueError("var must be positive")
        self.mean = np.asarray(getattr(mean, "values", mean), dtype=np.float64)
        self.var = float(var)
        self.schedule = schedule
        self.parameterization = Parameterization(parameterization)
        self.latent_channels = latent_channels
        self.cond_channels = cond_channels

    def posterior_mean(self, x_t: np.ndarray, t: int) -> np.ndarray:
        ab = self.schedule.alpha_bar(t)
        return (np.sqrt(ab) * self.var * x_t + (1.0 - ab) * self.mean) / (ab * self.var + (1.0 - ab))

    def __call__(self, noisy: np.ndarray, cond: np.ndarray, t: int) -> np.ndarray:
        return emit(noisy, self.posterior_mean(noisy, t), t, self.schedule, self.parameterization)


class PointwiseDenoiser:
    """Per-pixel map ``x0 = tanh(gain * x_t) + offset * cond_0``; translation-equivariant."""

    def __init__(self, schedule: DiffusionSchedule, parameterization="v", gain: float = 0.7,
                 offset: float = 0.3, latent_channels: int = 1, cond_channels: int = 3):
        self.schedule = schedule
        self.parameterization = Parameterization(parameterization)
        self.gain = gain
        self.offset = offset
        self.latent_channels = latent_channels
        self.cond_channels = cond_channels

    def __call__(self, noisy: np.ndarray, cond: np.ndarray, t: int) -> np.ndarray:
        x0 = np.tanh(self.gain * noisy) + self.offset * cond[:1]
        return emit(noisy, x0, t, self.schedule, self.parameterization)


class ConditioningPassthrough:
    """Refiner oracle whose clean estimate is a copy of leading conditioning channels."""

    def __init__(self, schedule: DiffusionSchedule, latent_channels: int = 1, cond_channels: int = 4,
                 parameterization="v"):
        self.schedule = schedule
        self.parameterization = Parameterization(parameterization)
        self.latent_channels = latent_channels
        self.cond_channels = cond_channels

    def __call__(self, noisy: np.ndarray, cond: np.ndarray, t: int) -> np.ndarray:
        return emit(noisy, cond[: self.latent_channels], t, self.schedule, self.parameterization)
