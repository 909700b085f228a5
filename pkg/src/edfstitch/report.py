"""Diagnostic report rendering: figures plus a flat CSV of scalars.

Everything renders through the Agg backend so reports work headless; each
figure is written as a PNG next to ``report.csv`` in the chosen directory.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .geometry import Correspondences, epipolar_line
from .image import ImageBuffer
from .metrics import MetricsReport
from .warp import StitchResult


def _as_rgb(buf: ImageBuffer) -> np.ndarray:
    if buf.channels == 1:
        return np.repeat(buf.data[:, :, None], 3, axis=2)
    return buf.data


def _save(fig, path: Path):
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)


def render_report(
    out_dir: str | Path,
    result: StitchResult,
    ref: ImageBuffer,
    tgt: ImageBuffer,
    corrs: Correspondences | None = None,
    metrics: MetricsReport | None = None,
) -> list[Path]:
    """Write diagnostic figures and report.csv; returns the created paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    created = []

    created.append(_write_csv(out / "report.csv", result, metrics))
    if corrs is not None and len(corrs):
        created.append(_fig_matches(out / "matches.png", ref, tgt, corrs))
    created.append(_fig_field(out / "displacement_field.png", result))
    created.append(_fig_overlap_error(out / "overlap_error.png", result))
    if result.calibration is not None:
        created.append(_fig_epipolar(out / "epipolar_lines.png", ref, tgt, result, corrs))
    return created


def _write_csv(path: Path, result: StitchResult, metrics: MetricsReport | None) -> Path:
    rows = sorted(result.diagnostics.items())
    if metrics is not None:
        rows += sorted(metrics.to_dict().items())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "value"])
        writer.writerows(rows)
    return path


def _fig_matches(path: Path, ref: ImageBuffer, tgt: ImageBuffer,
                 corrs: Correspondences, max_draw: int = 150) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(11, 5))
    axes[0].imshow(_as_rgb(tgt))
    axes[0].set_title("target")
    axes[1].imshow(_as_rgb(ref))
    axes[1].set_title("reference")
    step = max(1, len(corrs) // max_draw)
    src = corrs.src[::step]
    dst = corrs.dst[::step]
    axes[0].plot(src[:, 0], src[:, 1], "+", color="lime", ms=4)
    axes[1].plot(dst[:, 0], dst[:, 1], "+", color="lime", ms=4)
    for ax in axes:
        ax.set_axis_off()
    fig.suptitle(f"{len(corrs)} correspondences")
    _save(fig, path)
    return path


def _fig_field(path: Path, result: StitchResult) -> Path:
    grid = result.grid
    nv, nu = grid.shape
    step = max(1, max(nv, nu) // 40)
    anchors = grid.anchor_positions()[::step, ::step]
    du = grid.du[::step, ::step]
    dv = grid.dv[::step, ::step]
    fig, axes = plt.subplots(1, 2, figsize=(12, 5))
    mag = np.hypot(grid.du, grid.dv)
    im = axes[0].imshow(mag, origin="upper",
                        extent=[grid.origin[0], grid.origin[0] + (nu - 1) * grid.spacing,
                                grid.origin[1] + (nv - 1) * grid.spacing, grid.origin[1]])
    fig.colorbar(im, ax=axes[0], label="|displacement| (px)")
    axes[0].set_title("tapered field magnitude")
    axes[1].quiver(anchors[..., 0], anchors[..., 1], du, -dv, angles="xy")
    axes[1].invert_yaxis()
    axes[1].set_aspect("equal")
    axes[1].set_title("anchor displacements")
    _save(fig, path)
    return path


def _fig_overlap_error(path: Path, result: StitchResult) -> Path:
    both = result.ref_mask & result.tgt_mask
    pano = result.panorama.luma()
    fig, ax = plt.subplots(figsize=(7, 5))
    ax.imshow(pano, cmap="gray")
    overlay = np.zeros((*both.shape, 4))
    overlay[both] = (1.0, 0.3, 0.1, 0.25)
    ax.imshow(overlay)
    ax.set_axis_off()
    ax.set_title("panorama with overlap region")
    _save(fig, path)
    return path


def _fig_epipolar(path: Path, ref: ImageBuffer, tgt: ImageBuffer,
                  result: StitchResult, corrs: Correspondences | None,
                  n_lines: int = 6) -> Path:
    F = result.calibration.F
    fig, axes = plt.subplots(1, 2, figsize=(11, 5))
    axes[0].imshow(_as_rgb(tgt))
    axes[1].imshow(_as_rgb(ref))
    if corrs is not None and len(corrs):
        idx = np.linspace(0, len(corrs) - 1, min(n_lines, len(corrs))).astype(int)
        xs = np.linspace(0, tgt.width - 1, 64)
        for i in idx:
            dst = corrs.dst[i]
            line_t = epipolar_line(F, np.array([dst[0], dst[1], 1.0]), side="in_target")
            if abs(line_t[1]) > 1e-9:
                ys = -(line_t[0] * xs + line_t[2]) / line_t[1]
                axes[0].plot(xs, ys, lw=1)
            src = corrs.src[i]
            line_r = epipolar_line(F, np.array([src[0], src[1], 1.0]), side="in_reference")
            xr = np.linspace(0, ref.width - 1, 64)
            if abs(line_r[1]) > 1e-9:
                yr = -(line_r[0] * xr + line_r[2]) / line_r[1]
                axes[1].plot(xr, yr, lw=1)
    for ax, title in zip(axes, ("target epipolar lines", "reference epipolar lines")):
        ax.set_xlim(0, tgt.width)
        ax.set_ylim(tgt.height, 0)
        ax.set_title(title)
        ax.set_axis_off()
    _save(fig, path)
    return path
