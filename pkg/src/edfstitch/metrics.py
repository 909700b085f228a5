"""Alignment quality metrics: overlap SSIM / PSNR and the epipolar-distance
projectivity measure evaluated through the stitch mapping."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.ndimage

from .errors import EmptyOverlap, NoEvalPoints
from .geometry import Mat3, epipolar_line, point_line_distance
from .image import ImageBuffer

_C1 = (0.01 * 255.0) ** 2
_C2 = (0.03 * 255.0) ** 2
_WINDOW = 11
_SIGMA = 1.5
_PSNR_CAP = 99.0


@dataclass
class MetricsReport:
    ssim: float
    psnr: float
    projectivity_mean_px: float
    projectivity_max_px: float
    n_eval_points: int
    overlap_area_px: int

    def to_dict(self) -> dict:
        return {
            "ssim": self.ssim,
            "psnr": self.psnr,
            "projectivity_mean_px": self.projectivity_mean_px,
            "projectivity_max_px": self.projectivity_max_px,
            "n_eval_points": self.n_eval_points,
            "overlap_area_px": self.overlap_area_px,
        }


def overlap_mask(mask_a: np.ndarray, mask_b: np.ndarray, erode_px: int = 5) -> np.ndarray:
    """AND of the two masks eroded to exclude blend-feather borders."""
    m = mask_a & mask_b
    if erode_px > 0 and np.any(m):
        m = scipy.ndimage.binary_erosion(m, iterations=erode_px, border_value=0)
    return m


def _gaussian_window_filter(img: np.ndarray) -> np.ndarray:
    radius = _WINDOW // 2
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * _SIGMA * _SIGMA))
    k /= k.sum()
    tmp = scipy.ndimage.correlate1d(img, k, axis=0, mode="constant")
    return scipy.ndimage.correlate1d(tmp, k, axis=1, mode="constant")


def ssim(a: ImageBuffer, b: ImageBuffer, mask: np.ndarray) -> float:
    """Mean local SSIM over 11x11 Gaussian windows fully inside the mask.

    Grayscale via Rec.601 luma; the usual stabilization constants for 8-bit
    data. Raises EmptyOverlap when no complete window fits.
    """
    if a.data.shape[:2] != b.data.shape[:2]:
        raise ValueError("images must share dimensions")
    x = a.luma()
    y = b.luma()
    valid = scipy.ndimage.binary_erosion(
        mask, structure=np.ones((_WINDOW, _WINDOW), dtype=bool), border_value=0
    )
    if not np.any(valid):
        raise EmptyOverlap("no full SSIM window fits inside the mask")
    mu_x = _gaussian_window_filter(x)
    mu_y = _gaussian_window_filter(y)
    var_x = _gaussian_window_filter(x * x) - mu_x * mu_x
    var_y = _gaussian_window_filter(y * y) - mu_y * mu_y
    cov = _gaussian_window_filter(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + _C1) * (2.0 * cov + _C2)
    den = (mu_x * mu_x + mu_y * mu_y + _C1) * (var_x + var_y + _C2)
    return float(np.mean(num[valid] / den[valid]))


def psnr(a: ImageBuffer, b: ImageBuffer, mask: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over masked pixels, capped at 99."""
    if a.data.shape[:2] != b.data.shape[:2]:
        raise ValueError("images must share dimensions")
    if not np.any(mask):
        raise EmptyOverlap("mask selects no pixels")
    diff = a.to_float()[mask] - b.to_float()[mask]
    mse = float(np.mean(diff * diff))
    if mse < 255.0**2 * 10.0 ** (-9.9):
        return _PSNR_CAP
    return 10.0 * math.log10(255.0**2 / mse)


def projectivity_metric(
    F: Mat3,
    stitch_map: Callable[[np.ndarray], np.ndarray],
    eval_points: np.ndarray,
) -> tuple[float, float]:
    """Distance of mapped epipolar-line samples to their reference lines.

    ``eval_points`` is (N, 2): target-image points lying on epipolar lines
    (normally in the target's non-overlap region). Each point is pushed
    through the stitch mapping and measured against the corresponding
    reference epipolar line; returns (mean_px, max_px).
    """
    eval_points = np.asarray(eval_points, dtype=np.float64).reshape(-1, 2)
    if eval_points.size == 0:
        raise NoEvalPoints("no evaluation points supplied")
    mapped = stitch_map(eval_points)
    dists = np.empty(len(eval_points))
    for i, (yp, y) in enumerate(zip(eval_points, mapped)):
        line = epipolar_line(F, np.array([yp[0], yp[1], 1.0]), side="in_reference")
        dists[i] = abs(float(point_line_distance(line, y[None, :])[0]))
    return float(dists.mean()), float(dists.max())


def select_eval_points(
    F: Mat3,
    ref_points: np.ndarray,
    tgt_size: tuple[int, int],
    overlap_fn: Callable[[np.ndarray], np.ndarray],
    per_line: int = 3,
    max_lines: int | None = None,
    samples: int = 160,
) -> np.ndarray:
    """Sample points on inlier epipolar lines inside the target's non-overlap.

    For each reference-image point the corresponding epipolar line in the
    target is clipped to the image rectangle, the longest stretch for which
    ``overlap_fn`` reports no overlap is found, and ``per_line`` points at
    25/50/75% of that stretch are emitted. Returns (M, 2) target coordinates.
    """
    w, h = tgt_size
    ref_points = np.asarray(ref_points, dtype=np.float64).reshape(-1, 2)
    out = []
    n_lines = 0
    for xp in ref_points:
        if max_lines is not None and n_lines >= max_lines:
            break
        line = epipolar_line(F, np.array([xp[0], xp[1], 1.0]), side="in_target")
        seg = _clip_line_to_rect(line, w, h)
        if seg is None:
            continue
        p0, p1 = seg
        ts = np.linspace(0.0, 1.0, samples)
        pts = p0[None, :] + ts[:, None] * (p1 - p0)[None, :]
        non_overlap = ~overlap_fn(pts)
        run = _longest_true_run(non_overlap)
        if run is None:
            continue
        lo, hi = run
        if hi - lo < 3:
            continue
        fracs = np.linspace(0.25, 0.75, per_line)
        idx = (lo + fracs * (hi - lo)).astype(int)
        out.append(pts[idx])
        n_lines += 1
    if not out:
        raise NoEvalPoints("no epipolar line crosses the non-overlap region")
    return np.vstack(out)


def _clip_line_to_rect(line: np.ndarray, w: float, h: float):
    """Intersect a normalized line with the rectangle [0,w]x[0,h]; returns
    endpoint pair or None."""
    a, b, c = line
    pts = []
    # intersections with x = 0, x = w, y = 0, y = h
    if abs(b) > 1e-12:
        for x in (0.0, float(w)):
            y = -(a * x + c) / b
            if -1e-9 <= y <= h + 1e-9:
                pts.append((x, y))
    if abs(a) > 1e-12:
        for y in (0.0, float(h)):
            x = -(b * y + c) / a
            if -1e-9 <= x <= w + 1e-9:
                pts.append((x, y))
    if len(pts) < 2:
        return None
    arr = np.array(pts)
    # farthest pair among the (up to 4) candidates
    d2 = ((arr[:, None, :] - arr[None, :, :]) ** 2).sum(-1)
    i, j = np.unravel_index(np.argmax(d2), d2.shape)
    if d2[i, j] < 1.0:
        return None
    return arr[i], arr[j]


def _longest_true_run(flags: np.ndarray):
    """(start, end) indices of the longest contiguous True run, or None."""
    best = None
    start = None
    for i, f in enumerate(flags):
        if f and start is None:
            start = i
        elif not f and start is not None:
            if best is None or i - start > best[1] - best[0]:
                best = (start, i - 1)
            start = None
    if start is not None:
        if best is None or len(flags) - start > best[1] - best[0]:
            best = (start, len(flags) - 1)
    return best
