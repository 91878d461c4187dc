"""Overlapping-tile diffusion and the coarse-to-fine high-resolution pipeline."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .grid import Field2D, FieldStack, resample_array
from .normalize import DepthNormalization, denormalize_values
from .schedule import (
    DiffusionSchedule,
    Denoiser,
    TimestepSpacing,
    ddim_sample,
    ddim_step,
    initial_noise,
)

log = logging.getLogger(__name__)

DEFAULT_OVERLAP = 0.5
MAX_OVERLAP = 0.9
UNIT_RANGE = DepthNormalization(0.0, 1.0)


def engine_threads() -> int:
    """Worker cap from ``ENGINE_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("ENGINE_THREADS", "1")))
    except ValueError:
        return 1


def chamfer_weights(tile_h: int, tile_w: int) -> np.ndarray:
    """``1 + `` L1 distance from each pixel to the nearest tile border pixel."""
    if tile_h < 1 or tile_w < 1:
        raise ValueError("tile dimensions must be positive")
    r = np.arange(tile_h)
    c = np.arange(tile_w)
    dr = np.minimum(r, tile_h - 1 - r)[:, None]
    dc = np.minimum(c, tile_w - 1 - c)[None, :]
    return 1.0 + np.minimum(dr, dc).astype(np.float64)


def _axis_origins(canvas: int, tile: int, stride: int) -> list[int]:
    origins: list[int] = []
    pos = 0
    while True:
        o = min(pos, canvas - tile)
        if not origins or o > origins[-1]:
            origins.append(o)
        if pos + tile >= canvas:
            return origins
        pos += stride


@dataclass(frozen=True, eq=False)
class TileLayout:
    canvas_h: int
    canvas_w: int
    tile_h: int
    tile_w: int
    overlap_fraction: float
    tiles: tuple[tuple[int, int], ...]
    weight: np.ndarray

    def slices(self, i: int) -> tuple[slice, slice]:
        r, c = self.tiles[i]
        return slice(r, r + self.tile_h), slice(c, c + self.tile_w)

    def weight_sum(self) -> np.ndarray:
        total = np.zeros((self.canvas_h, self.canvas_w))
        for i in range(len(self.tiles)):
            total[self.slices(i)] += self.weight
        return total


def make_tile_layout(
    canvas_h: int, canvas_w: int, tile_h: int, tile_w: int, overlap_fraction: float = DEFAULT_OVERLAP
) -> TileLayout:
    """Regular grid of tile origins with the last row/column clamped to the canvas edge."""
    if tile_h > canvas_h or tile_w > canvas_w:
        raise ValueError(f"tile {tile_h}x{tile_w} larger than canvas {canvas_h}x{canvas_w}")
    if tile_h < 1 or tile_w < 1:
        raise ValueError("tile dimensions must be positive")
    if not 0.0 <= overlap_fraction <= MAX_OVERLAP:
        raise ValueError(f"overlap_fraction must be in [0, {MAX_OVERLAP}]")
    stride_h = max(1, int(tile_h * (1.0 - overlap_fraction)))
    stride_w = max(1, int(tile_w * (1.0 - overlap_fraction)))
    rows = _axis_origins(canvas_h, tile_h, stride_h)
    cols = _axis_origins(canvas_w, tile_w, stride_w)
    tiles = tuple((r, c) for r in rows for c in cols)
    return TileLayout(canvas_h, canvas_w, tile_h, tile_w, overlap_fraction, tiles, chamfer_weights(tile_h, tile_w))


def fuse_tiles(tile_outputs: Sequence, layout: TileLayout):
    """Blend per-tile outputs into one canvas with the layout's border weights.

    Each canvas pixel becomes the weight-normalized average of the tiles that
    cover it. The sum is taken as offsets from the first covering tile, in
    ascending tile order, so a single covering tile or a constant input is
    reproduced bit for bit.
    """
    if len(tile_outputs) != len(layout.tiles):
        raise ValueError(f"expected {len(layout.tiles)} tile outputs, got {len(tile_outputs)}")
    as_stack = isinstance(tile_outputs[0], FieldStack)
    arrays = [np.asarray(getattr(t, "values", t), dtype=np.float64) for t in tile_outputs]
    channels = arrays[0].shape[0]
    for a in arrays:
        if a.shape != (channels, layout.tile_h, layout.tile_w):
            raise ValueError(f"tile output shape {a.shape} does not match the layout")
    total = layout.weight_sum()
    if np.any(total <= 0):
        raise ValueError("layout leaves canvas pixels uncovered")
    base = np.zeros((channels, layout.canvas_h, layout.canvas_w))
    assigned = np.zeros((layout.canvas_h, layout.canvas_w), dtype=bool)
    for i, a in enumerate(arrays):
        rs, cs = layout.slices(i)
        fresh = ~assigned[rs, cs]
        base[:, rs, cs] = np.where(fresh, a, base[:, rs, cs])
        assigned[rs, cs] = True
    acc = np.zeros_like(base)
    for i, a in enumerate(arrays):
        rs, cs = layout.slices(i)
        acc[:, rs, cs] += (layout.weight / total[rs, cs]) * (a - base[:, rs, cs])
    out = base + acc
    return FieldStack(out) if as_stack else out


def multidiffusion_sample(
    canvas_cond: np.ndarray,
    denoiser: Denoiser,
    layout: TileLayout,
    spacing: TimestepSpacing,
    schedule: DiffusionSchedule,
    seed: int,
    threads: Optional[int] = None,
) -> np.ndarray:
    """DDIM sampling of one canvas latent, denoised tile by tile and fused every step."""
    cond = np.asarray(getattr(canvas_cond, "values", canvas_cond), dtype=np.float64)
    if cond.shape[1:] != (layout.canvas_h, layout.canvas_w):
        raise ValueError("conditioning does not cover the canvas")
    if cond.shape[0] != denoiser.cond_channels:
        raise ValueError(
            f"denoiser expects {denoiser.cond_channels} conditioning channels, got {cond.shape[0]}"
        )
    if spacing.T != schedule.T:
        raise ValueError("spacing and schedule disagree on T")
    x = initial_noise((denoiser.latent_channels, layout.canvas_h, layout.canvas_w), seed)
    threads = engine_threads() if threads is None else threads
    slices = [layout.slices(i) for i in range(len(layout.tiles))]

    for t, t_prev in spacing.pairs():
        def step_tile(sl, t=t, t_prev=t_prev, x=x):
            rs, cs = sl
            xt = x[:, rs, cs]
            out = denoiser(xt, cond[:, rs, cs], t)
            return ddim_step(xt, out, denoiser.parameterization, t, t_prev, schedule)

        if threads > 1 and len(slices) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                outs = list(pool.map(step_tile, slices))
        else:
            outs = [step_tile(sl) for sl in slices]
        x = fuse_tiles(outs, layout)
    return x


def _as_array(image) -> np.ndarray:
    arr = np.asarray(getattr(image, "values", image), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    return arr


def hires_pipeline(
    image,
    base_denoiser: Denoiser,
    refiner: Optional[Denoiser],
    target_scale: int,
    spacing: TimestepSpacing,
    schedule: DiffusionSchedule,
    seed: int,
    tile_size: Optional[tuple[int, int]] = None,
    overlap_fraction: float = DEFAULT_OVERLAP,
    native_size: Optional[tuple[int, int]] = None,
    norm: DepthNormalization = UNIT_RANGE,
) -> Field2D:
    """Global prediction at native resolution, then x2 tiled refinement stages.

    Stage ``k`` conditions the refiner on ``cat(global_depth_latent, image)``
    resampled to ``2**k`` times the native size and draws its initial noise
    from ``seed + k``. The result is channel-averaged and mapped out of the
    ``[-1, 1]`` latent range with ``norm``.
    """
    if target_scale < 1 or target_scale & (target_scale - 1):
        raise ValueError(f"target_scale must be a power of 2, got {target_scale}")
    img = _as_array(image)
    n_stages = target_scale.bit_length() - 1
    if img.shape[0] != base_denoiser.cond_channels:
        raise ValueError("base denoiser conditioning does not match the image channels")
    if n_stages and (
        refiner is None
        or refiner.latent_channels != base_denoiser.latent_channels
        or refiner.cond_channels != base_denoiser.latent_channels + img.shape[0]
    ):
        raise ValueError("refiner channel signature incompatible with (depth latent, global depth, image)")

    h, w = native_size or img.shape[1:]
    latent = ddim_sample(base_denoiser, resample_array(img, h, w), spacing, schedule, seed=seed)
    for k in range(1, n_stages + 1):
        hk, wk = h * 2**k, w * 2**k
        glob = resample_array(latent, hk, wk)
        cond = np.concatenate([glob, resample_array(img, hk, wk)], axis=0)
        th, tw = tile_size or (h, w)
        layout = make_tile_layout(hk, wk, min(th, hk), min(tw, wk), overlap_fraction)
        log.debug("refinement stage %d: %dx%d canvas, %d tiles", k, hk, wk, len(layout.tiles))
        latent = multidiffusion_sample(cond, refiner, layout, spacing, schedule, seed + k)
    return Field2D(denormalize_values(latent.mean(axis=0), norm))
