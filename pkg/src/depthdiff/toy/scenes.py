"""Procedural synthetic scenes: planes and spheres under orthographic viewing.

Depth is measured in pixel units along the viewing axis, so depth gradients
and image-plane offsets share one unit and normals follow directly from
``(-dd/dx, -dd/dy, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..grid import Field2D, FieldStack
from ..normalize import unit_normals

LIGHT_DIR = np.array([-0.3, -0.5, 1.0]) / np.linalg.norm([-0.3, -0.5, 1.0])
AMBIENT = 0.2


@dataclass(frozen=True, eq=False)
class ToyScene:
    rgb: FieldStack
    depth: Field2D
    normals: FieldStack
    seed: int


@dataclass(frozen=True)
class Sphere:
    cx: int
    cy: int
    cz: float
    radius: float


def normals_from_depth(depth: Field2D) -> FieldStack:
    """Orthographic normals ``(-dd/dx, -dd/dy, 1)`` from central differences."""
    d = depth.values
    if min(d.shape) < 2:
        raise ValueError("depth must be at least 2x2")
    d_row, d_col = np.gradient(d)
    n, _ = unit_normals(np.stack([-d_col, -d_row, np.ones_like(d)]))
    return FieldStack(n, depth.mask)


def sphere_depth_normals(sphere: Sphere, h: int, w: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Front-surface depth, analytic normals and coverage of one sphere."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = xx - sphere.cx
    dy = yy - sphere.cy
    rho2 = dx * dx + dy * dy
    inside = rho2 < sphere.radius**2
    height = np.sqrt(np.where(inside, sphere.radius**2 - rho2, 0.0))
    depth = np.where(inside, sphere.cz - height, np.inf)
    normals = np.stack([-dx, -dy, height]) / sphere.radius
    return depth, normals, inside


def gen_scene(
    seed: int,
    h: int,
    w: int,
    n_planes: Optional[int] = None,
    n_spheres: Optional[int] = None,
    max_slope: float = 0.3,
) -> ToyScene:
    """Deterministic scene of 1-3 slanted planes and 0-2 spheres with Lambertian shading.

    The first plane fills the frame as background; further planes are
    rectangular cards in front of it, and spheres sit in front of everything.
    """
    if h < 16 or w < 16:
        raise ValueError("scenes must be at least 16x16")
    rng = np.random.default_rng(seed)
    n_planes = int(rng.integers(1, 4)) if n_planes is None else n_planes
    n_spheres = int(rng.integers(0, 3)) if n_spheres is None else n_spheres
    if n_planes < 1:
        raise ValueError("need at least the background plane")
    size = float(max(h, w))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0

    depth = np.full((h, w), np.inf)
    normals = np.zeros((3, h, w))
    albedo = np.zeros((3, h, w))

    def paint(obj_depth, obj_normals, cover, color):
        closer = cover & (obj_depth < depth)
        depth[closer] = obj_depth[closer]
        normals[:, closer] = obj_normals[:, closer] if obj_normals.ndim == 3 else obj_normals[:, None]
        albedo[:, closer] = color[:, None]

    for k in range(n_planes):
        gx, gy = rng.uniform(-max_slope, max_slope, size=2)
        z0 = rng.uniform(3.0, 4.0) * size if k == 0 else rng.uniform(1.5, 2.5) * size
        plane = z0 + gx * (xx - cx) + gy * (yy - cy)
        n_plane = np.array([-gx, -gy, 1.0]) / np.sqrt(gx * gx + gy * gy + 1.0)
        if k == 0:
            cover = np.ones((h, w), dtype=bool)
        else:
            ph, pw = (rng.uniform(0.3, 0.6, size=2) * (h, w)).astype(int)
            r0 = int(rng.integers(0, h - ph + 1))
            c0 = int(rng.integers(0, w - pw + 1))
            cover = np.zeros((h, w), dtype=bool)
            cover[r0 : r0 + ph, c0 : c0 + pw] = True
        paint(plane, n_plane, cover, rng.uniform(0.3, 1.0, size=3))

    for _ in range(n_spheres):
        radius = rng.uniform(0.15, 0.3) * min(h, w)
        sphere = Sphere(
            cx=int(rng.integers(0, w)),
            cy=int(rng.integers(0, h)),
            cz=rng.uniform(1.0, 1.4) * size,
            radius=radius,
        )
        s_depth, s_normals, inside = sphere_depth_normals(sphere, h, w)
        paint(s_depth, s_normals, inside, rng.uniform(0.3, 1.0, size=3))

    shade = np.clip(np.einsum("chw,c->hw", normals, LIGHT_DIR), 0.0, None)
    rgb = np.clip(albedo * (AMBIENT + (1.0 - AMBIENT) * shade), 0.0, 1.0)
    return ToyScene(FieldStack(rgb), Field2D(depth), FieldStack(normals), seed)
