"""Dense 2D fields with validity masks, plus the order statistics,
resampling and least-squares fits shared by the rest of the package.

Values are stored as ``float64`` numpy arrays. ``Field2D.values`` has shape
``(H, W)``; ``FieldStack.values`` has shape ``(C, H, W)``. A mask, when
present, is a boolean ``(H, W)`` array where ``True`` marks a valid pixel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class DegenerateError(ValueError):
    """Raised when an input makes a fit or normalization ill-posed."""


@dataclass(frozen=True, eq=False)
class Field2D:
    values: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.size == 0:
            raise ValueError(f"Field2D needs a non-empty 2D array, got shape {values.shape}")
        mask = self.mask
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != values.shape:
                raise ValueError(f"mask shape {mask.shape} != values shape {values.shape}")
        valid = values if mask is None else values[mask]
        if not np.all(np.isfinite(valid)):
            raise ValueError("Field2D has non-finite values at valid pixels")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def valid_mask(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.shape, dtype=bool)
        return self.mask

    def valid_values(self) -> np.ndarray:
        return self.values if self.mask is None else self.values[self.mask]

    def with_values(self, values: np.ndarray) -> "Field2D":
        return Field2D(values, self.mask)


@dataclass(frozen=True, eq=False)
class FieldStack:
    values: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or values.size == 0:
            raise ValueError(f"FieldStack needs a non-empty (C, H, W) array, got shape {values.shape}")
        mask = self.mask
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != values.shape[1:]:
                raise ValueError(f"mask shape {mask.shape} != plane shape {values.shape[1:]}")
        valid = values if mask is None else values[:, mask]
        if not np.all(np.isfinite(valid)):
            raise ValueError("FieldStack has non-finite values at valid pixels")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_planes(cls, planes: Sequence[Field2D]) -> "FieldStack":
        if not planes:
            raise ValueError("need at least one plane")
        shape = planes[0].shape
        for p in planes[1:]:
            if p.shape != shape:
                raise ValueError("planes differ in size")
            if (p.mask is None) != (planes[0].mask is None) or (
                p.mask is not None and not np.array_equal(p.mask, planes[0].mask)
            ):
                raise ValueError("planes must share one mask")
        return cls(np.stack([p.values for p in planes]), planes[0].mask)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def planes(self) -> list[Field2D]:
        return [Field2D(v, self.mask) for v in self.values]

    def plane(self, i: int) -> Field2D:
        return Field2D(self.values[i], self.mask)


def _check_same_grid(a: Field2D, b: Field2D) -> None:
    if a.shape != b.shape:
        raise ValueError(f"field sizes differ: {a.shape} vs {b.shape}")


def joint_mask(*fields: Field2D) -> np.ndarray:
    mask = fields[0].valid_mask().copy()
    for f in fields[1:]:
        _check_same_grid(fields[0], f)
        mask &= f.valid_mask()
    return mask


def percentile(field: Field2D, q: float) -> float:
    """Linearly interpolated ``q``-th percentile over valid pixels.

    The rank is ``q / 100 * (n - 1)`` into the sorted valid values, so
    ``q=0`` gives the minimum and ``q=100`` the maximum.
    """
    if not 0.0 <= q <= 100.0:
        raise ValueError(f"q must be in [0, 100], got {q}")
    vals = field.valid_values()
    if vals.size == 0:
        raise DegenerateError("no valid pixels")
    return float(np.percentile(vals, q, method="linear"))


def pixelwise_median(members: Sequence[Field2D]) -> Field2D:
    """Per-pixel median; an even member count averages the two middle values."""
    if len(members) == 0:
        raise ValueError("need at least one member")
    first = members[0]
    for m in members[1:]:
        _check_same_grid(first, m)
        if (m.mask is None) != (first.mask is None) or (
            m.mask is not None and not np.array_equal(m.mask, first.mask)
        ):
            raise ValueError("members must share one mask")
    if len(members) == 1:
        return first
    stacked = np.stack([m.values for m in members])
    return Field2D(np.median(stacked, axis=0), first.mask)


def _bilinear_taps(n_in: int, n_out: int):
    # pixel-center sampling (align_corners=False), source coords clamped to the edge
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resample_array(values: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Bilinear resampling of the trailing two axes of ``values``."""
    if new_h < 1 or new_w < 1:
        raise ValueError(f"target size must be positive, got {new_h}x{new_w}")
    h, w = values.shape[-2:]
    if (h, w) == (new_h, new_w):
        return values.copy()
    r0, r1, fr = _bilinear_taps(h, new_h)
    c0, c1, fc = _bilinear_taps(w, new_w)
    fr = fr[:, None]
    top = values[..., r0, :] * (1.0 - fr) + values[..., r1, :] * fr
    return top[..., c0] * (1.0 - fc) + top[..., c1] * fc


def resample_mask(mask: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Conservative mask propagation: valid only if all four taps are valid."""
    h, w = mask.shape
    if (h, w) == (new_h, new_w):
        return mask.copy()
    r0, r1, _ = _bilinear_taps(h, new_h)
    c0, c1, _ = _bilinear_taps(w, new_w)
    return (
        mask[np.ix_(r0, c0)] & mask[np.ix_(r0, c1)] & mask[np.ix_(r1, c0)] & mask[np.ix_(r1, c1)]
    )


def resample_bilinear(field: Field2D, new_h: int, new_w: int) -> Field2D:
    if field.mask is None:
        return Field2D(resample_array(field.values, new_h, new_w))
    filled = np.where(field.mask, field.values, 0.0)
    return Field2D(resample_array(filled, new_h, new_w), resample_mask(field.mask, new_h, new_w))


def least_squares_affine(pred: Field2D, gt: Field2D) -> tuple[float, float]:
    """Scale and shift minimizing ``sum((s * pred + t - gt) ** 2)`` over jointly valid pixels."""
    mask = joint_mask(pred, gt)
    p = pred.values[mask]
    g = gt.values[mask]
    if p.size < 2:
        raise DegenerateError("need at least 2 valid overlapping pixels")
    # centred form of the 2x2 normal equations
    p_mean = p.mean()
    g_mean = g.mean()
    dp = p - p_mean
    var = np.dot(dp, dp)
    if var <= np.finfo(np.float64).tiny or var <= 1e-24 * max(1.0, p_mean * p_mean) * p.size:
        raise DegenerateError("degenerate fit: prediction is constant over the overlap")
    scale = np.dot(dp, g - g_mean) / var
    shift = g_mean - scale * p_mean
    return float(scale), float(shift)


def scale_align(pred: Field2D, gt: Field2D) -> float:
    """Scale ``s`` minimizing ``sum((s * pred - gt) ** 2)`` with the shift pinned at zero."""
    mask = joint_mask(pred, gt)
    p = pred.values[mask]
    g = gt.values[mask]
    denom = np.dot(p, p)
    if denom <= 0.0:
        raise DegenerateError("degenerate fit: prediction is zero over the overlap")
    return float(np.dot(p, g) / denom)
