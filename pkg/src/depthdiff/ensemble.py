"""Test-time ensembling of affine-invariant depth and of surface normals."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .grid import DegenerateError, Field2D, FieldStack
from .normalize import unit_normals

log = logging.getLogger(__name__)

DEFAULT_LAMBDA = 0.02
DEFAULT_MAX_ITERS = 50
DEFAULT_TOL = 1e-3
INITIAL_STEP = 0.05


@dataclass
class EnsembleSolution:
    scales: np.ndarray
    shifts: np.ndarray
    merged: Field2D
    objective_value: float
    iterations_used: int
    uncertainty: Optional[Field2D] = None
    objective_trace: list[float] = field(default_factory=list)


def _stack_members(members: Sequence[Field2D]) -> tuple[np.ndarray, np.ndarray]:
    if len(members) == 0:
        raise ValueError("need at least one member")
    shape = members[0].shape
    mask = np.ones(shape, dtype=bool)
    for m in members:
        if m.shape != shape:
            raise ValueError(f"member sizes differ: {m.shape} vs {shape}")
        mask &= m.valid_mask()
    if not mask.any():
        raise DegenerateError("members share no valid pixel")
    return np.stack([m.values for m in members]), mask


def range_penalty(merged: np.ndarray) -> float:
    """``|min m| + |1 - max m|``: zero exactly when ``m`` spans ``[0, 1]``."""
    return abs(float(merged.min())) + abs(1.0 - float(merged.max()))


def _objective(aligned: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    # aligned: (N, P) valid pixels of the scaled/shifted members
    n = aligned.shape[0]
    pair_sum = 0.0
    for i in range(n - 1):
        diff = aligned[i + 1 :] - aligned[i]
        pair_sum += float(np.sum(diff * diff))
    b = n * (n - 1) / 2
    merged = np.median(aligned, axis=0)
    return np.sqrt(pair_sum / b) + lam * range_penalty(merged), merged


def ensemble_objective(
    members: Sequence[Field2D],
    scales: Sequence[float],
    shifts: Sequence[float],
    lam: float = DEFAULT_LAMBDA,
) -> float:
    """Pairwise alignment distance plus ``lam`` times the range penalty of the median."""
    if len(members) < 2:
        raise ValueError("the ensemble objective needs at least 2 members")
    stack, mask = _stack_members(members)
    s = np.asarray(scales, dtype=np.float64)
    t = np.asarray(shifts, dtype=np.float64)
    if s.shape != (len(members),) or t.shape != (len(members),):
        raise ValueError("need one scale and one shift per member")
    aligned = stack[:, mask] * s[:, None] + t[:, None]
    value, _ = _objective(aligned, lam)
    return value


def optimize_ensemble(
    members: Sequence[Field2D],
    lam: float = DEFAULT_LAMBDA,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
    seed: int = 0,
) -> EnsembleSolution:
    """Jointly align ``members`` by per-member scale and shift, then merge by median.

    Each member is first min-max normalized to ``[0, 1]``; Nelder-Mead then
    refines a scale and shift on top of that normalization. Working relative to
    the min-max frame makes the result independent of any positive affine
    transform applied to an individual input. ``seed`` picks the sign pattern
    of the initial simplex.
    """
    stack, mask = _stack_members(members)
    n = stack.shape[0]
    valid = stack[:, mask]
    lo = valid.min(axis=1)
    hi = valid.max(axis=1)
    span = hi - lo
    if np.any(span <= 0):
        raise DegenerateError("degenerate member: constant depth")
    unit = (valid - lo[:, None]) / span[:, None]

    def full_map(sig: np.ndarray, tau: np.ndarray) -> np.ndarray:
        out = (stack - lo[:, None, None]) / span[:, None, None] * sig[:, None, None] + tau[:, None, None]
        return out

    if n == 1:
        merged = full_map(np.ones(1), np.zeros(1))[0]
        return EnsembleSolution(
            scales=1.0 / span,
            shifts=-lo / span,
            merged=Field2D(merged, None if mask.all() else mask),
            objective_value=lam * range_penalty(unit[0]),
            iterations_used=0,
            uncertainty=Field2D(np.zeros_like(merged), None if mask.all() else mask),
            objective_trace=[],
        )

    def fun(x: np.ndarray) -> float:
        value, _ = _objective(unit * x[:n, None] + x[n:, None], lam)
        return value

    x0 = np.concatenate([np.ones(n), np.zeros(n)])
    signs = np.random.default_rng(seed).choice([-1.0, 1.0], size=2 * n)
    simplex = np.vstack([x0] + [x0 + INITIAL_STEP * signs[k] * np.eye(2 * n)[k] for k in range(2 * n)])

    trace = [fun(x0)]

    def record(intermediate_result):
        trace.append(float(intermediate_result.fun))

    res = minimize(
        fun,
        x0,
        method="Nelder-Mead",
        callback=record,
        options={
            "maxiter": max_iters,
            "initial_simplex": simplex,
            "fatol": tol,
            "xatol": np.inf,
        },
    )
    sig, tau = res.x[:n], res.x[n:]
    value, _ = _objective(unit * sig[:, None] + tau[:, None], lam)
    aligned = full_map(sig, tau)
    merged = np.median(aligned, axis=0)
    uncertainty = np.median(np.abs(aligned - merged[None]), axis=0)
    log.debug("ensemble of %d: objective %.6g after %d iterations", n, value, res.nit)
    out_mask = None if mask.all() else mask
    return EnsembleSolution(
        scales=sig / span,
        shifts=tau - sig * lo / span,
        merged=Field2D(merged, out_mask),
        objective_value=float(value),
        iterations_used=int(res.nit),
        uncertainty=Field2D(uncertainty, out_mask),
        objective_trace=trace,
    )


def ensemble_normals(members: Sequence[FieldStack]) -> FieldStack:
    """Per pixel, pick the member normal closest in angle to the normalized mean.

    Ties go to the lowest member index, so the result is always one of the
    inputs, never a blend.
    """
    if len(members) == 0:
        raise ValueError("need at least one member")
    shape = members[0].values.shape
    if shape[0] != 3:
        raise ValueError("normals need 3 channels")
    for m in members[1:]:
        if m.values.shape != shape:
            raise ValueError(f"member sizes differ: {m.values.shape} vs {shape}")
    if len(members) == 1:
        return members[0]
    stack = np.stack([m.values for m in members])
    mean_dir, _ = unit_normals(stack.mean(axis=0))
    cosine = np.einsum("nchw,chw->nhw", stack, mean_dir)
    best = np.argmax(cosine, axis=0)
    picked = np.take_along_axis(stack, best[None, None], axis=0)[0]
    return FieldStack(picked, members[0].mask)
