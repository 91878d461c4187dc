"""Denoiser training on toy scenes and consistency distillation into a one-step student.

Randomness is split up front with ``SeedSequence(seed).spawn``: stream 0
initializes parameters, stream 1 draws scene indices and timesteps, and
stream 2 draws Gaussian noise. Runs are therefore bit-reproducible and the
noise stream does not shift when the batch layout changes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..normalize import normalize_depth
from ..schedule import (
    DiffusionSchedule,
    LcmConfig,
    Parameterization,
    TimestepSpacing,
    ddim_sample,
    ema_update,
    initial_noise,
    lcm_boundary_coeffs,
    make_schedule,
)
from .network import ToyArchitecture, ToyDenoiser
from .scenes import ToyScene

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 100
BETTERDEPTH_ETA = 0.1


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, trace: Sequence[float]):
        super().__init__(message)
        self.trace = list(trace)


class Adam:
    def __init__(self, n: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.step_count = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.step_count += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.step_count)
        v_hat = self.v / (1 - self.beta2**self.step_count)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def scene_tensors(scenes: Sequence[ToyScene], latent_channels: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Stack normalized depth targets ``(N, Cl, H, W)`` and RGB conditioning ``(N, 3, H, W)``."""
    if not scenes:
        raise ValueError("need at least one scene")
    shape = scenes[0].depth.shape
    targets, conds = [], []
    for s in scenes:
        if s.depth.shape != shape:
            raise ValueError("all training scenes must share one size")
        d_tilde, _ = normalize_depth(s.depth)
        targets.append(np.repeat(d_tilde.values[None], latent_channels, axis=0))
        conds.append(s.rgb.values)
    return np.stack(targets), np.stack(conds)


def _coeffs(schedule: DiffusionSchedule, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ab = np.where(t < 0, 1.0, schedule.alphas_cumprod[np.maximum(t, 0)])
    return np.sqrt(ab)[:, None, None, None], np.sqrt(1.0 - ab)[:, None, None, None]


def regression_target(x0, eps, a, b, param: Parameterization) -> np.ndarray:
    if param is Parameterization.EPSILON:
        return eps
    if param is Parameterization.X0:
        return x0
    return a * eps - b * x0


def x0_from_output(out, x_t, a, b, param: Parameterization) -> tuple[np.ndarray, np.ndarray]:
    """Batched clean estimate and its derivative with respect to the model output."""
    if param is Parameterization.V:
        return a * x_t - b * out, -b
    if param is Parameterization.EPSILON:
        return (x_t - b * out) / a, -b / a
    return out, np.ones_like(a)


def denoising_loss(
    model: ToyDenoiser, params: np.ndarray, x0, cond, t, eps, schedule: DiffusionSchedule
) -> tuple[float, np.ndarray]:
    """Mean squared error against the regression target, and its parameter gradient."""
    a, b = _coeffs(schedule, t)
    x_t = a * x0 + b * eps
    out, cache = model.apply(params, x_t, cond, t)
    diff = out - regression_target(x0, eps, a, b, model.parameterization)
    loss = float(np.mean(diff * diff))
    grad = model.backward(params, cache, 2.0 * diff / diff.size)
    return loss, grad


def train_denoiser(
    scenes: Sequence[ToyScene],
    param="v",
    iters: int = 2000,
    batch: int = 4,
    lr: float = 2e-3,
    seed: int = 0,
    schedule: Optional[DiffusionSchedule] = None,
    arch: Optional[ToyArchitecture] = None,
    init: Optional[ToyDenoiser] = None,
) -> ToyDenoiser:
    """Fit a toy denoiser by Adam on the Monte-Carlo denoising objective.

    The image is the conditioning and the normalized depth the diffusion
    target. Raises :class:`TrainingDiverged` if the loss stays above ten times
    its first value for 100 consecutive iterations.
    """
    schedule = schedule or make_schedule()
    param = Parameterization(param)
    init_rng, draw_rng, noise_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    if init is None:
        arch = arch or ToyArchitecture()
        model = ToyDenoiser(arch, arch.init_params(int(init_rng.integers(2**31))), param)
    else:
        model = init.copy()
        model.parameterization = param
    x0_all, cond_all = scene_tensors(scenes, model.latent_channels)
    if cond_all.shape[1] != model.cond_channels:
        raise ValueError("scene conditioning does not match the denoiser input")

    params = model.params.copy()
    opt = Adam(params.size, lr)
    trace: list[float] = []
    over = 0
    for it in range(iters):
        idx = draw_rng.integers(len(scenes), size=batch)
        t = draw_rng.integers(0, schedule.T, size=batch)
        eps = noise_rng.standard_normal(x0_all[idx].shape)
        loss, grad = denoising_loss(model, params, x0_all[idx], cond_all[idx], t, eps, schedule)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at iteration {it}", trace)
        trace.append(loss)
        over = over + 1 if loss > DIVERGENCE_FACTOR * trace[0] else 0
        if over >= DIVERGENCE_PATIENCE:
            raise TrainingDiverged(f"loss above {DIVERGENCE_FACTOR}x initial for {over} iterations", trace)
        params = opt.step(params, grad)
    model.params = params
    model.loss_trace = trace
    return model


@dataclass(frozen=True)
class DistillConfig:
    skip_k: int = 200
    huber_c: float = 0.001
    ema_mu: float = 0.95
    iterations: int = 1000
    batch_size: int = 4
    learning_rate: float = 2e-3
    seed: int = 0
    sigma_data: float = 0.5
    epsilon_boundary: float = 0.0
    # "stratified" spreads each batch over [skip_k, T); "uniform" draws independently
    timestep_sampling: str = "stratified"
    # "cosine" anneals the step size to zero over the run; "constant" keeps it fixed
    lr_schedule: str = "cosine"

    def __post_init__(self):
        if self.timestep_sampling not in ("stratified", "uniform"):
            raise ValueError(f"unknown timestep_sampling {self.timestep_sampling!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lcm(self) -> LcmConfig:
        return LcmConfig(self.sigma_data, self.epsilon_boundary, self.skip_k, self.huber_c, self.ema_mu)


def _sample_distill_timesteps(rng: np.random.Generator, n: int, T: int, k: int, stratified: bool) -> np.ndarray:
    if stratified:
        # one draw per equal-width stratum of [k, T); never needs a redraw
        return k + ((np.arange(n) + rng.random(n)) * (T - k) / n).astype(np.int64)
    # rejection: t < k has no valid t - k, so it is redrawn rather than clamped
    t = rng.integers(0, T, size=n)
    while np.any(t < k):
        bad = t < k
        t[bad] = rng.integers(0, T, size=int(bad.sum()))
    return t


def _consistency_batch(model, params, x, cond, t, cfg: LcmConfig, schedule):
    coeffs = np.array([lcm_boundary_coeffs(int(ti), cfg, schedule) for ti in t])
    c_skip = coeffs[:, 0][:, None, None, None]
    c_out = coeffs[:, 1][:, None, None, None]
    a, b = _coeffs(schedule, t)
    out, cache = model.apply(params, x, cond, t)
    x0, dx0 = x0_from_output(out, x, a, b, model.parameterization)
    return c_skip * x + c_out * x0, c_out * dx0, cache


def distill_lcm(
    teacher: ToyDenoiser,
    cfg: DistillConfig,
    scenes: Sequence[ToyScene],
    schedule: DiffusionSchedule,
) -> ToyDenoiser:
    """Consistency-distill ``teacher`` into a student that denoises in one step.

    Student and EMA target both start as exact copies of the teacher. Each
    iteration diffuses a clean sample to ``t``, lets the teacher take one DDIM
    step to ``t - skip_k``, and pulls the student's consistency output at
    ``t`` toward the target's output at ``t - skip_k`` under the Pseudo-Huber
    loss. The target then tracks the student by EMA.
    """
    lcm = cfg.lcm()
    lcm.validate(schedule.T)
    student = teacher.copy()
    if cfg.iterations == 0:
        return student
    target_params = teacher.params.copy()
    params = teacher.params.copy()
    x0_all, cond_all = scene_tensors(scenes, teacher.latent_channels)
    _, draw_rng, noise_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3))
    opt = Adam(params.size, cfg.learning_rate)
    param = teacher.parameterization
    trace: list[float] = []
    c = lcm.huber_c
    for it in range(cfg.iterations):
        if cfg.lr_schedule == "cosine":
            opt.lr = cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * it / cfg.iterations))
        idx = draw_rng.integers(len(scenes), size=cfg.batch_size)
        t = _sample_distill_timesteps(
            draw_rng, cfg.batch_size, schedule.T, lcm.skip_k, cfg.timestep_sampling == "stratified"
        )
        t_prev = t - lcm.skip_k
        x0, cond = x0_all[idx], cond_all[idx]
        eps = noise_rng.standard_normal(x0.shape)
        a, b = _coeffs(schedule, t)
        x_t = a * x0 + b * eps

        # teacher DDIM step t -> t - k
        t_out = teacher.predict(x_t, cond, t)
        x0_hat, _ = x0_from_output(t_out, x_t, a, b, param)
        eps_hat = (x_t - a * x0_hat) / b
        a_p, b_p = _coeffs(schedule, t_prev)
        x_prev = a_p * x0_hat + b_p * eps_hat

        f_target, _, _ = _consistency_batch(teacher, target_params, x_prev, cond, t_prev, lcm, schedule)
        f_student, df_dout, cache = _consistency_batch(teacher, params, x_t, cond, t, lcm, schedule)

        resid = f_student - f_target
        sq = np.sum(resid * resid, axis=(1, 2, 3))
        root = np.sqrt(sq + c * c)
        loss = float(np.mean(sq / (root + c)))
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite distillation loss at iteration {it}", trace)
        trace.append(loss)
        grad_f = resid / root[:, None, None, None] / cfg.batch_size
        grad = teacher.backward(params, cache, grad_f * df_dout)
        params = opt.step(params, grad)
        target_params = ema_update(target_params, params, lcm.ema_mu)
    student.params = params
    student.loss_trace = trace
    return student


def lcm_sample(
    student: ToyDenoiser, cond: np.ndarray, schedule: DiffusionSchedule, cfg: LcmConfig, seed: int
) -> np.ndarray:
    """One-step consistency sampling from pure noise at ``t = T - 1``."""
    cond = np.asarray(cond, dtype=np.float64)
    x = initial_noise((student.latent_channels,) + cond.shape[1:], seed)[None]
    t = np.array([schedule.T - 1])
    f, _, _ = _consistency_batch(student, student.params, x, cond[None], t, cfg, schedule)
    return f[0]


def reconstruction_mse(
    sampler_output: np.ndarray, scene: ToyScene
) -> float:
    target, _ = scene_tensors([scene], sampler_output.shape[0])
    return float(np.mean((sampler_output - target[0]) ** 2))


def ddim_reconstruction_mse(
    model: ToyDenoiser, scene: ToyScene, spacing: TimestepSpacing, schedule: DiffusionSchedule, seed: int
) -> float:
    out = ddim_sample(model, scene.rgb.values, spacing, schedule, seed=seed)
    return reconstruction_mse(out, scene)


def patch_loss_mask(global_pred: np.ndarray, gt: np.ndarray, patch: int, eta: float = BETTERDEPTH_ETA) -> np.ndarray:
    """Keep-mask over pixels: a patch is kept when its mean absolute
    disagreement between the aligned global prediction and ground truth is at
    most ``eta``.
    """
    global_pred = np.asarray(global_pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if global_pred.shape != gt.shape:
        raise ValueError("prediction and ground truth differ in size")
    if patch < 1:
        raise ValueError("patch must be positive")
    h, w = gt.shape
    keep = np.zeros((h, w), dtype=bool)
    for r in range(0, h, patch):
        for c in range(0, w, patch):
            block = np.abs(global_pred[r : r + patch, c : c + patch] - gt[r : r + patch, c : c + patch])
            keep[r : r + patch, c : c + patch] = block.mean() <= eta
    return keep
