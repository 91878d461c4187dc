"""Noise schedules, DDIM stepping and the consistency-distillation algebra.

Latents are plain numpy arrays (usually ``(C, H, W)``); every function that
takes a latent also accepts a :class:`~depthdiff.grid.FieldStack` or
:class:`~depthdiff.grid.Field2D` and returns the same kind it was given.
Timesteps are 0-based: ``t`` indexes ``alphas_cumprod[t]`` and ``t = -1``
denotes the clean endpoint where the cumulative alpha is taken as 1.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .grid import Field2D, FieldStack


class Parameterization(str, enum.Enum):
    EPSILON = "epsilon"
    V = "v"
    X0 = "x0"


class SpacingMode(str, enum.Enum):
    LEADING = "leading"
    TRAILING = "trailing"


def _unwrap(x) -> tuple[np.ndarray, Callable[[np.ndarray], object]]:
    if isinstance(x, FieldStack):
        return x.values, lambda v: FieldStack(v, x.mask)
    if isinstance(x, Field2D):
        return x.values, lambda v: Field2D(v, x.mask)
    return np.asarray(x, dtype=np.float64), lambda v: v


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    betas: np.ndarray
    alphas_cumprod: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        acp = np.asarray(self.alphas_cumprod, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0 or betas.shape != acp.shape:
            raise ValueError("betas and alphas_cumprod must be equal-length 1D arrays")
        if np.any(np.diff(acp) >= 0):
            raise ValueError("alphas_cumprod must be strictly decreasing")
        if acp[0] >= 1.0 or acp[-1] < 0.0:
            raise ValueError("alphas_cumprod must lie in [0, 1)")
        betas.flags.writeable = False
        acp.flags.writeable = False
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas_cumprod", acp)

    @property
    def T(self) -> int:
        return self.betas.size

    def alpha_bar(self, t: int) -> float:
        if t == -1:
            return 1.0
        if not 0 <= t < self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T - 1}]")
        return float(self.alphas_cumprod[t])

    def signal_noise(self, t: int) -> tuple[float, float]:
        """``(sqrt(abar_t), sqrt(1 - abar_t))``."""
        ab = self.alpha_bar(t)
        return float(np.sqrt(ab)), float(np.sqrt(1.0 - ab))

    @property
    def zero_terminal_snr(self) -> bool:
        return self.alphas_cumprod[-1] == 0.0


def make_schedule(
    T: int = 1000,
    beta_start: float = 0.00085,
    beta_end: float = 0.012,
    kind: str = "scaled_linear",
) -> DiffusionSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "scaled_linear":
        betas = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), T, dtype=np.float64) ** 2
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return DiffusionSchedule(betas, np.cumprod(1.0 - betas))


def rescale_zero_snr(schedule: DiffusionSchedule) -> DiffusionSchedule:
    """Shift and stretch ``sqrt(abar)`` so the last step carries no signal.

    ``sqrt(abar_0)`` is kept fixed and ``sqrt(abar_{T-1})`` is moved to exactly
    zero; betas are recomputed from the new cumulative product, so the final
    beta becomes 1. Already-rescaled schedules are returned unchanged.
    """
    if schedule.T < 2:
        raise ValueError("zero-SNR rescaling needs at least 2 timesteps")
    if schedule.zero_terminal_snr:
        return schedule
    sqrt_ab = np.sqrt(schedule.alphas_cumprod)
    first, last = sqrt_ab[0], sqrt_ab[-1]
    sqrt_ab = (sqrt_ab - last) * (first / (first - last))
    sqrt_ab[0] = first
    sqrt_ab[-1] = 0.0
    acp = sqrt_ab**2
    acp[0] = schedule.alphas_cumprod[0]
    alphas = np.empty_like(acp)
    alphas[0] = acp[0]
    alphas[1:] = acp[1:] / acp[:-1]
    return DiffusionSchedule(1.0 - alphas, acp)


def forward_diffuse(x0, eps, t: int, schedule: DiffusionSchedule):
    """``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``."""
    x0_arr, wrap = _unwrap(x0)
    eps_arr, _ = _unwrap(eps)
    _same_shape(x0_arr, eps_arr)
    a, b = schedule.signal_noise(t)
    return wrap(a * x0_arr + b * eps_arr)


def predict_x0_eps(model_out, x_t, t: int, schedule: DiffusionSchedule, param) -> tuple[np.ndarray, np.ndarray]:
    """Clean-sample and noise estimates implied by a model output."""
    out, _ = _unwrap(model_out)
    x, _ = _unwrap(x_t)
    _same_shape(out, x)
    param = Parameterization(param)
    a, b = schedule.signal_noise(t)
    if param is Parameterization.V:
        return a * x - b * out, b * x + a * out
    if param is Parameterization.EPSILON:
        if a == 0.0:
            raise ZeroDivisionError("epsilon prediction does not determine x0 at zero SNR")
        return (x - b * out) / a, out
    if b == 0.0:
        raise ZeroDivisionError("x0 prediction does not determine the noise at abar = 1")
    return out, (x - a * out) / b


def convert_parameterization(model_out, x_t, t: int, schedule: DiffusionSchedule, src, dst):
    """Re-express a model output under another parameterization.

    Uses ``v = sqrt(abar) * eps - sqrt(1 - abar) * x0`` together with the
    forward-process identity tying ``x_t``, ``x0`` and ``eps``.
    """
    src, dst = Parameterization(src), Parameterization(dst)
    if src is dst:
        raise ValueError(f"source and target parameterization are both {src.value}")
    _, wrap = _unwrap(model_out)
    x0, eps = predict_x0_eps(model_out, x_t, t, schedule, src)
    if dst is Parameterization.X0:
        return wrap(x0)
    if dst is Parameterization.EPSILON:
        return wrap(eps)
    a, b = schedule.signal_noise(t)
    return wrap(a * eps - b * x0)


@dataclass(frozen=True)
class TimestepSpacing:
    mode: SpacingMode
    steps: tuple[int, ...]
    T: int

    def pairs(self) -> list[tuple[int, int]]:
        """``(t, t_prev)`` for every sampler step; the last ``t_prev`` is -1."""
        nxt = list(self.steps[1:]) + [-1]
        return list(zip(self.steps, nxt))


def make_spacing(T: int, n_steps: int, mode="trailing") -> TimestepSpacing:
    """Pick ``n_steps`` inference timesteps out of ``T`` training steps.

    Trailing spacing rounds ``T - 1 - i * T / n`` half-up and always starts at
    ``T - 1``; leading spacing uses ``(n - 1 - i) * (T // n)`` and, for a single
    step, lands on ``t = 0``.
    """
    mode = SpacingMode(mode)
    if not 1 <= n_steps <= T:
        raise ValueError(f"need 1 <= n_steps <= T, got n_steps={n_steps}, T={T}")
    if mode is SpacingMode.TRAILING:
        # exact integer form of floor((T - 1) - i*T/n + 1/2)
        raw = [(2 * ((T - 1) * n_steps - i * T) + n_steps) // (2 * n_steps) for i in range(n_steps)]
    else:
        stride = T // n_steps
        raw = [(n_steps - 1 - i) * stride for i in range(n_steps)]
    steps: list[int] = []
    for s in raw:
        s = min(max(s, 0), T - 1)
        if not steps or s < steps[-1]:
            steps.append(s)
    return TimestepSpacing(mode, tuple(steps), T)


def ddim_step(x_t, model_out, param, t: int, t_prev: int, schedule: DiffusionSchedule):
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``."""
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be smaller than t ({t})")
    _, wrap = _unwrap(x_t)
    x0, eps = predict_x0_eps(model_out, x_t, t, schedule, param)
    if t_prev == -1:
        return wrap(x0)
    a, b = schedule.signal_noise(t_prev)
    return wrap(a * x0 + b * eps)


class Denoiser(Protocol):
    """Anything that maps ``(noisy_latent, conditioning, t)`` to a model output.

    ``noisy_latent`` is ``(latent_channels, H, W)``, ``conditioning`` is
    ``(cond_channels, H, W)``; the output has the shape of ``noisy_latent`` and
    is read under ``parameterization``.
    """

    parameterization: Parameterization
    latent_channels: int
    cond_channels: int

    def __call__(self, noisy: np.ndarray, cond: np.ndarray, t: int) -> np.ndarray: ...


def initial_noise(shape: Sequence[int], seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(tuple(shape))


def ddim_sample(
    denoiser: Denoiser,
    cond: np.ndarray,
    spacing: TimestepSpacing,
    schedule: DiffusionSchedule,
    seed: int | None = None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Run the deterministic DDIM chain from Gaussian noise to a clean latent."""
    if spacing.T != schedule.T:
        raise ValueError("spacing and schedule disagree on T")
    cond = np.asarray(cond, dtype=np.float64)
    if noise is None:
        if seed is None:
            raise ValueError("pass either seed or noise")
        noise = initial_noise((denoiser.latent_channels,) + cond.shape[1:], seed)
    x = np.asarray(noise, dtype=np.float64)
    for t, t_prev in spacing.pairs():
        out = denoiser(x, cond, t)
        x = ddim_step(x, out, denoiser.parameterization, t, t_prev, schedule)
    return x


@dataclass(frozen=True)
class LcmConfig:
    sigma_data: float = 0.5
    epsilon_boundary: float = 0.0
    skip_k: int = 200
    huber_c: float = 0.001
    ema_mu: float = 0.95

    def validate(self, T: int) -> None:
        if self.sigma_data <= 0:
            raise ValueError("sigma_data must be positive")
        if self.epsilon_boundary < 0:
            raise ValueError("epsilon_boundary must be non-negative")
        if not 0 < self.skip_k < T:
            raise ValueError(f"skip_k must be in (0, {T}), got {self.skip_k}")
        if self.huber_c <= 0:
            raise ValueError("huber_c must be positive")
        if not 0.0 <= self.ema_mu < 1.0:
            raise ValueError("ema_mu must be in [0, 1)")


def lcm_boundary_coeffs(t: int, cfg: LcmConfig, schedule: DiffusionSchedule) -> tuple[float, float]:
    """``(c_skip, c_out)`` for the consistency function at step ``t``.

    The step is mapped to ``[0, 1]`` as ``t / (T - 1)`` before the usual
    closed forms are applied; at ``t / (T - 1) == epsilon_boundary`` the pair
    is exactly ``(1, 0)``.
    """
    if not 0 <= t < schedule.T:
        raise ValueError(f"timestep {t} outside [0, {schedule.T - 1}]")
    tau = t / (schedule.T - 1) if schedule.T > 1 else 0.0
    d = tau - cfg.epsilon_boundary
    sd2 = cfg.sigma_data**2
    c_skip = sd2 / (d * d + sd2)
    c_out = d / np.sqrt(d * d + sd2)
    return float(c_skip), float(c_out)


def consistency_apply(x_t, x0_pred, t: int, cfg: LcmConfig, schedule: DiffusionSchedule):
    """``c_skip(t) * x_t + c_out(t) * x0_pred``."""
    x, wrap = _unwrap(x_t)
    x0, _ = _unwrap(x0_pred)
    _same_shape(x, x0)
    c_skip, c_out = lcm_boundary_coeffs(t, cfg, schedule)
    return wrap(c_skip * x + c_out * x0)


def pseudo_huber(x, y, c: float) -> float:
    """``sqrt(||x - y||^2 + c^2) - c`` with one norm over the whole array."""
    if c <= 0:
        raise ValueError("c must be positive")
    xa, _ = _unwrap(x)
    ya, _ = _unwrap(y)
    _same_shape(xa, ya)
    r2 = float(np.sum((xa - ya) ** 2))
    # algebraically identical, avoids cancellation for tiny residuals
    return r2 / (np.sqrt(r2 + c * c) + c)


def ema_update(target_params, student_params, mu: float) -> np.ndarray:
    """``mu * target + (1 - mu) * student``; a pure value computation."""
    if not 0.0 <= mu < 1.0:
        raise ValueError("mu must be in [0, 1)")
    target = np.asarray(target_params, dtype=np.float64)
    student = np.asarray(student_params, dtype=np.float64)
    if target.shape != student.shape:
        raise ValueError("parameter vectors differ in length")
    return mu * target + (1.0 - mu) * student
