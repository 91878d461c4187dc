"""Evaluation metrics for depth, normals, depth edges and images."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage, signal

from .grid import Field2D, FieldStack, joint_mask, least_squares_affine

DELTA1_THRESHOLD = 1.25
ANGLE_THRESHOLD_DEG = 11.25
UNIT_TOLERANCE = 1e-3
EDGE_THRESHOLD = 0.1
DBE_TRUNCATION_PX = 10.0
EDGE_MATCH_PX = 1
PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MIN_ALIGNED_DEPTH = 1e-6


@dataclass
class MetricsReport:
    values: dict[str, float]
    pixel_count: int
    config: dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.values.items():
            if not np.isfinite(v):
                raise ValueError(f"metric {k} is not finite: {v}")

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def to_text(self) -> str:
        """Flat ``key = value`` lines, sorted, with ``repr`` floats for bit-stable output."""
        lines = [f"pixel_count = {self.pixel_count}"]
        lines += [f"{k} = {float(v)!r}" for k, v in sorted(self.values.items())]
        lines += [f"config.{k} = {v!r}" if isinstance(v, float) else f"config.{k} = {v}"
                  for k, v in sorted(self.config.items())]
        return "\n".join(lines) + "\n"


class EdgeSource(str, enum.Enum):
    PRED = "pred"
    GT = "gt"


@dataclass(frozen=True, eq=False)
class EdgeMap:
    edges: np.ndarray
    threshold: float
    source: EdgeSource = EdgeSource.PRED

    @property
    def shape(self) -> tuple[int, int]:
        return self.edges.shape


def _positive_pair(aligned: Field2D, gt: Field2D) -> tuple[np.ndarray, np.ndarray]:
    mask = joint_mask(aligned, gt)
    a = aligned.values[mask]
    d = gt.values[mask]
    if a.size == 0:
        raise ValueError("no valid pixels")
    return a, d


def absrel(aligned: Field2D, gt: Field2D) -> float:
    """Mean ``|a - d| / d`` over valid pixels, in percent."""
    a, d = _positive_pair(aligned, gt)
    if np.any(d <= 0):
        raise ValueError("ground-truth depth must be positive on valid pixels")
    return float(np.mean(np.abs(a - d) / d) * 100.0)


def delta1(aligned: Field2D, gt: Field2D) -> float:
    """Percentage of valid pixels with ``max(a/d, d/a) < 1.25``."""
    a, d = _positive_pair(aligned, gt)
    if np.any(d <= 0) or np.any(a <= 0):
        raise ValueError("delta1 needs strictly positive depths")
    ratio = np.maximum(a / d, d / a)
    return float(np.mean(ratio < DELTA1_THRESHOLD) * 100.0)


def evaluate_depth(pred: Field2D, gt: Field2D) -> MetricsReport:
    """Least-squares align ``pred`` to ``gt``, then score AbsRel and delta1.

    Aligned depths are clipped from below at ``MIN_ALIGNED_DEPTH`` so that the
    ratio metric stays defined.
    """
    scale, shift = least_squares_affine(pred, gt)
    mask = joint_mask(pred, gt)
    aligned = Field2D(np.maximum(pred.values * scale + shift, MIN_ALIGNED_DEPTH), mask)
    gt_m = Field2D(gt.values, mask)
    return MetricsReport(
        values={"absrel": absrel(aligned, gt_m), "delta1": delta1(aligned, gt_m)},
        pixel_count=int(mask.sum()),
        config={"scale": scale, "shift": shift, "delta1_threshold": DELTA1_THRESHOLD},
    )


def angular_errors(pred: FieldStack, gt: FieldStack) -> np.ndarray:
    """Per-pixel angle in degrees between two unit normal maps (valid pixels only)."""
    if pred.values.shape != gt.values.shape or pred.channels != 3:
        raise ValueError("normal maps must both be (3, H, W) of equal size")
    mask = np.ones(pred.values.shape[1:], dtype=bool)
    for s in (pred, gt):
        if s.mask is not None:
            mask &= s.mask
    p = pred.values[:, mask]
    g = gt.values[:, mask]
    for name, v in (("pred", p), ("gt", g)):
        length = np.sqrt(np.sum(v * v, axis=0))
        if np.any(np.abs(length - 1.0) > UNIT_TOLERANCE):
            raise ValueError(f"{name} normals are not unit length")
    # atan2 form: exact zero for identical vectors, well-conditioned near 0 and 180 degrees
    cross = np.linalg.norm(np.cross(p, g, axis=0), axis=0)
    return np.degrees(np.arctan2(cross, np.sum(p * g, axis=0)))


def angular_metrics(pred: FieldStack, gt: FieldStack) -> tuple[float, float]:
    """Mean angular error (degrees) and percent of pixels under 11.25 degrees."""
    err = angular_errors(pred, gt)
    return float(err.mean()), float(np.mean(err < ANGLE_THRESHOLD_DEG) * 100.0)


def sobel_magnitude(values: np.ndarray) -> np.ndarray:
    # /8 turns the 3x3 Sobel response into a per-pixel slope
    gx = ndimage.sobel(values, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(values, axis=0, mode="nearest") / 8.0
    return np.hypot(gx, gy)


def extract_depth_edges(
    d: Field2D, threshold: float = EDGE_THRESHOLD, source: EdgeSource = EdgeSource.PRED
) -> EdgeMap:
    """Edges where the Sobel slope of the min-max normalized depth exceeds ``threshold``."""
    values = d.values
    if d.mask is not None:
        fill = float(np.median(d.valid_values())) if d.mask.any() else 0.0
        values = np.where(d.mask, values, fill)
    lo, hi = values.min(), values.max()
    if hi > lo:
        values = (values - lo) / (hi - lo)
    else:
        values = np.zeros_like(values)
    mag = sobel_magnitude(values)
    edges = (mag > threshold) & (mag > 0)
    return EdgeMap(edges, float(threshold), EdgeSource(source))


def _truncated_mean_distance(src: np.ndarray, dst: np.ndarray, trunc: float) -> float:
    if not src.any() or not dst.any():
        return float(trunc)
    dist = ndimage.distance_transform_edt(~dst)
    return float(np.mean(np.minimum(dist[src], trunc)))


def dbe(pred_edges: EdgeMap, gt_edges: EdgeMap, trunc_px: float = DBE_TRUNCATION_PX) -> tuple[float, float]:
    """Depth boundary error ``(accuracy, completeness)`` in pixels.

    Accuracy averages the truncated Euclidean distance from each predicted edge
    pixel to the nearest ground-truth edge; completeness is the same from the
    ground-truth side. An empty edge set on either side scores ``trunc_px``.
    """
    if pred_edges.shape != gt_edges.shape:
        raise ValueError("edge maps differ in size")
    if trunc_px <= 0:
        raise ValueError("trunc_px must be positive")
    acc = _truncated_mean_distance(pred_edges.edges, gt_edges.edges, trunc_px)
    comp = _truncated_mean_distance(gt_edges.edges, pred_edges.edges, trunc_px)
    return acc, comp


def _matched_fraction(src: np.ndarray, dst: np.ndarray, match_px: int) -> float:
    if not src.any():
        return 1.0 if not dst.any() else 0.0
    if match_px > 0:
        near = ndimage.maximum_filter(dst, size=2 * match_px + 1, mode="constant", cval=False)
    else:
        near = dst
    return float(np.mean(near[src]))


def edge_pr(pred_edges: EdgeMap, gt_edges: EdgeMap, match_px: int = EDGE_MATCH_PX) -> tuple[float, float]:
    """Edge precision and recall with a Chebyshev matching radius of ``match_px``."""
    if pred_edges.shape != gt_edges.shape:
        raise ValueError("edge maps differ in size")
    if match_px < 0:
        raise ValueError("match_px must be >= 0")
    precision = _matched_fraction(pred_edges.edges, gt_edges.edges, match_px)
    recall = _matched_fraction(gt_edges.edges, pred_edges.edges, match_px)
    return precision, recall


def psnr(pred, gt, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; identical inputs give ``PSNR_CAP_DB``."""
    p = np.asarray(getattr(pred, "values", pred), dtype=np.float64)
    g = np.asarray(getattr(gt, "values", gt), dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((p - g) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, float(10.0 * np.log10(peak * peak / mse)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> np.ndarray:
    """Local SSIM over every full 11x11 Gaussian window (no padding)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    w = gaussian_window()

    def filt(img):
        return signal.correlate(img, w, mode="valid", method="direct")

    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x**2
    var_y = filt(y * y) - mu_y**2
    cov = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return num / den


def ssim(pred, gt) -> float:
    """Mean SSIM of two single-channel images in ``[0, 1]``."""
    p = np.asarray(getattr(pred, "values", pred), dtype=np.float64)
    g = np.asarray(getattr(gt, "values", gt), dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("ssim takes single-channel images; average per channel for stacks")
    return float(np.mean(ssim_map(p, g)))


def evaluate_normals(pred: FieldStack, gt: FieldStack) -> MetricsReport:
    err = angular_errors(pred, gt)
    return MetricsReport(
        values={
            "mean_angular_error_deg": float(err.mean()),
            "pct_below_11_25": float(np.mean(err < ANGLE_THRESHOLD_DEG) * 100.0),
        },
        pixel_count=int(err.size),
        config={"angle_threshold_deg": ANGLE_THRESHOLD_DEG},
    )


def evaluate_image(pred: FieldStack, gt: FieldStack, peak: float = 1.0, shading: bool = False) -> MetricsReport:
    """PSNR and channel-averaged SSIM.

    With ``shading=True`` the prediction is first scale-aligned to the ground
    truth and both maps are then brought to the unit range.
    """
    p, g = pred.values, gt.values
    if p.shape != g.shape:
        raise ValueError("image sizes differ")
    config: dict[str, object] = {"peak": peak, "lpips": "unavailable"}
    if shading:
        denom = float(np.sum(p * p))
        if denom <= 0:
            raise ValueError("degenerate fit: prediction is zero")
        s = float(np.sum(p * g) / denom)
        p = p * s
        top = max(float(p.max()), float(g.max()))
        if top > 0:
            p, g = p / top, g / top
        config["scale"] = s
    values = {
        "psnr": psnr(p, g, peak),
        "ssim": float(np.mean([ssim(pc, gc) for pc, gc in zip(p, g)])),
    }
    return MetricsReport(values=values, pixel_count=int(p[0].size), config=config)


def evaluate_edges(
    pred: Field2D,
    gt: Field2D,
    threshold: float = EDGE_THRESHOLD,
    trunc_px: float = DBE_TRUNCATION_PX,
    match_px: int = EDGE_MATCH_PX,
    pred_threshold: Optional[float] = None,
) -> MetricsReport:
    pe = extract_depth_edges(pred, threshold if pred_threshold is None else pred_threshold, EdgeSource.PRED)
    ge = extract_depth_edges(gt, threshold, EdgeSource.GT)
    acc, comp = dbe(pe, ge, trunc_px)
    prc, rec = edge_pr(pe, ge, match_px)
    return MetricsReport(
        values={"dbe_acc": acc, "dbe_comp": comp, "edge_precision": prc, "edge_recall": rec},
        pixel_count=int(pred.values.size),
        config={"edge_threshold": threshold, "dbe_trunc_px": trunc_px, "edge_match_px": match_px},
    )
