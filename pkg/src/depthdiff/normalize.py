"""Affine-invariant depth normalization, channel replication, and unit normals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import DegenerateError, Field2D, FieldStack, percentile

LOW_PERCENTILE = 2.0
HIGH_PERCENTILE = 98.0
DEGENERATE_NORM = 1e-8
FALLBACK_NORMAL = (0.0, 0.0, 1.0)


@dataclass(frozen=True)
class DepthNormalization:
    d2: float
    d98: float

    def __post_init__(self):
        if not self.d98 > self.d2:
            raise DegenerateError(f"degenerate depth range: d2={self.d2}, d98={self.d98}")


def normalize_depth(d: Field2D) -> tuple[Field2D, DepthNormalization]:
    """Map the 2nd/98th depth percentiles to -1/+1.

    Values beyond the percentile anchors are left unclamped, so the output
    only mostly lies in ``[-1, 1]``.
    """
    if d.valid_values().size < 2:
        raise DegenerateError("need at least 2 valid pixels")
    d2 = percentile(d, LOW_PERCENTILE)
    d98 = percentile(d, HIGH_PERCENTILE)
    if d98 == d2:
        raise DegenerateError("degenerate depth range")
    norm = DepthNormalization(d2, d98)
    return d.with_values(normalize_values(d.values, norm)), norm


def normalize_values(values: np.ndarray, norm: DepthNormalization) -> np.ndarray:
    return ((values - norm.d2) / (norm.d98 - norm.d2) - 0.5) * 2.0


def denormalize_values(values: np.ndarray, norm: DepthNormalization) -> np.ndarray:
    return (values / 2.0 + 0.5) * (norm.d98 - norm.d2) + norm.d2


def denormalize_depth(d_tilde: Field2D, norm: DepthNormalization) -> Field2D:
    return d_tilde.with_values(denormalize_values(d_tilde.values, norm))


def replicate_channels(d: Field2D, channels: int = 3) -> FieldStack:
    return FieldStack(np.repeat(d.values[None], channels, axis=0), d.mask)


def average_channels(s: FieldStack, expected: int | None = 3) -> Field2D:
    if expected is not None and s.channels != expected:
        raise ValueError(f"expected {expected} channels, got {s.channels}")
    # offset form keeps replicated planes bit-exact: (x + x + x) / 3 can round away from x
    first = s.values[0]
    return Field2D(first + (s.values - first).mean(axis=0), s.mask)


def unit_normals(n: np.ndarray) -> tuple[np.ndarray, int]:
    """Normalize a ``(3, H, W)`` array along axis 0.

    Vectors shorter than ``DEGENERATE_NORM`` become ``(0, 0, 1)``; the second
    return value counts them.
    """
    n = np.asarray(n, dtype=np.float64)
    if n.shape[0] != 3:
        raise ValueError(f"expected 3 channels, got {n.shape[0]}")
    length = np.sqrt(np.sum(n * n, axis=0))
    bad = length < DEGENERATE_NORM
    out = n / np.where(bad, 1.0, length)
    if bad.any():
        out[:, bad] = np.asarray(FALLBACK_NORMAL)[:, None]
    return out, int(bad.sum())


def normalize_normals(n: FieldStack) -> tuple[FieldStack, int]:
    out, n_bad = unit_normals(n.values)
    return FieldStack(out, n.mask), n_bad
