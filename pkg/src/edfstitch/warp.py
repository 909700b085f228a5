"""Canvas layout, mesh-based backward warping and feathered blending.

Rectangle and canvas arithmetic use corner extents: an image of size (w, h)
occupies [0, w] x [0, h] and its pixel centers sit at integer coordinates
0..w-1. Canvas pixel (i, j) corresponds to reference-frame coordinate
(i + ox, j + oy).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .calibration import (
    RefineInfo,
    StereoCalibration,
    compatibility_residual,
    infinite_homography,
    initial_intrinsics,
    refine_calibration,
    rotation_from_F,
)
from .config import PipelineConfig
from .edf import (
    DisplacementGrid,
    EDFModel,
    TPSModel,
    build_displacement_grid,
    compute_residuals,
    fit_edf,
    fit_tps,
)
from .errors import DegenerateGeometry, EpipoleAtInfinity, ExcessiveCanvas
from .geometry import (
    Correspondences,
    Mat3,
    epipoles_from_F,
    estimate_fundamental_ransac,
    fit_homography_dlt,
)
from .image import ImageBuffer, bilinear_sample


@dataclass
class Canvas:
    """Output pixel grid; contains the full reference rectangle."""

    offset: tuple[int, int]   # canvas (0,0) in reference coordinates
    width: int
    height: int


@dataclass
class WarpMesh:
    """Forward-mapped anchor lattice in canvas coordinates."""

    positions: np.ndarray    # (nv, nu, 2)
    spacing: float
    warped_origin: np.ndarray  # (2,) warped-plane position of anchor (0, 0)
    quad_valid: np.ndarray   # (nv-1, nu-1) bool: convex, positively oriented
    quad_displaced: np.ndarray  # (nv-1, nu-1) bool: any corner carries field


def _quad_flags(positions: np.ndarray, du: np.ndarray, dv: np.ndarray):
    """Validity: all four corner turns of each quad have positive orientation
    (convex, not flipped). Displaced: any corner displacement nonzero."""
    a = positions[:-1, :-1]
    b = positions[:-1, 1:]
    c = positions[1:, 1:]
    d = positions[1:, :-1]

    def cross(p, q, r):
        return ((q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1])
                - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0]))

    # traversal a -> b -> c -> d is clockwise on screen axes (y down), which
    # makes the z-cross positive for an unflipped quad
    valid = (cross(a, b, c) > 0) & (cross(b, c, d) > 0) \
        & (cross(c, d, a) > 0) & (cross(d, a, b) > 0)
    moved = (du != 0) | (dv != 0)
    displaced = moved[:-1, :-1] | moved[:-1, 1:] | moved[1:, 1:] | moved[1:, :-1]
    return valid, displaced


def build_warp_mesh(grid: DisplacementGrid, canvas: Canvas) -> WarpMesh:
    """Anchor + displacement, expressed in canvas coordinates."""
    anchors = grid.anchor_positions()
    pos = anchors.copy()
    pos[..., 0] += grid.du - canvas.offset[0]
    pos[..., 1] += grid.dv - canvas.offset[1]
    valid, displaced = _quad_flags(pos, grid.du, grid.dv)
    return WarpMesh(positions=pos, spacing=grid.spacing,
                    warped_origin=grid.origin.copy(),
                    quad_valid=valid, quad_displaced=displaced)


def compute_canvas(
    ref_size: tuple[int, int],
    tgt_size: tuple[int, int],
    H_inf: Mat3,
    grid: DisplacementGrid,
    canvas_cap: float = 64.0,
) -> Canvas:
    """Bounding box of the reference rectangle and all valid displaced
    anchors. Anchors whose pre-image under H_inf has a third homogeneous
    coordinate below 1e-6 (behind the camera or near the 180-degree limit)
    are discarded.
    """
    rw, rh = ref_size
    anchors = grid.anchor_positions().reshape(-1, 2)
    Hi = np.linalg.inv(H_inf)
    pre_w = anchors @ Hi[2, :2] + Hi[2, 2]
    ok = pre_w >= 1e-6
    pts = anchors[ok] + np.column_stack([grid.du.ravel()[ok], grid.dv.ravel()[ok]])

    min_x, min_y, max_x, max_y = 0.0, 0.0, float(rw), float(rh)
    if pts.size:
        min_x = min(min_x, float(pts[:, 0].min()))
        min_y = min(min_y, float(pts[:, 1].min()))
        max_x = max(max_x, float(pts[:, 0].max()))
        max_y = max(max_y, float(pts[:, 1].max()))
    ox = int(math.floor(min_x))
    oy = int(math.floor(min_y))
    width = int(math.ceil(max_x)) - ox
    height = int(math.ceil(max_y)) - oy
    if width * height > canvas_cap * rw * rh:
        raise ExcessiveCanvas(
            f"canvas {width}x{height} exceeds {canvas_cap:g}x the reference area"
        )
    return Canvas(offset=(ox, oy), width=width, height=height)


def _inverse_bilinear(q: np.ndarray, q00, q10, q01, q11, eps: float = 1e-9):
    """Vectorized inverse of the bilinear quad map for points q (N, 2).

    Corner arguments may be single corners or per-point (N, 2) arrays.
    Returns (s, t, ok); the closed-form quadratic root inside [0, 1]^2 is
    selected. Callers verify the forward map afterwards.
    """
    E = np.broadcast_to(q10 - q00, q.shape)
    Fv = np.broadcast_to(q01 - q00, q.shape)
    G = np.broadcast_to(q11 - q10 - q01 + q00, q.shape)
    h = q - q00

    def cross(a, b):
        return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]

    c2 = -cross(Fv, G) * np.ones(len(q))
    c1 = cross(h, G) - cross(Fv, E)
    c0 = cross(h, E)

    t = np.full(len(q), -1.0)
    lin = np.abs(c2) < eps * (np.abs(c1) + 1.0)
    nz = np.abs(c1) > eps
    t[lin & nz] = -c0[lin & nz] / c1[lin & nz]

    quad = ~lin
    disc = c1 * c1 - 4.0 * c2 * c0
    has = quad & (disc >= 0)
    sq = np.sqrt(np.where(has, disc, 0.0))
    # numerically stable pair of roots
    qq = -0.5 * (c1 + np.sign(c1 + (c1 == 0)) * sq)
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(has & (np.abs(c2) > 0), qq / c2, -1.0)
        r2 = np.where(has & (np.abs(qq) > 0), c0 / qq, -1.0)
    in1 = (r1 >= -1e-6) & (r1 <= 1.0 + 1e-6)
    in2 = (r2 >= -1e-6) & (r2 <= 1.0 + 1e-6)
    t = np.where(quad, np.where(in1, r1, np.where(in2, r2, -1.0)), t)

    denom_x = E[:, 0] + t * G[:, 0]
    denom_y = E[:, 1] + t * G[:, 1]
    use_x = np.abs(denom_x) >= np.abs(denom_y)
    num_x = h[:, 0] - t * Fv[:, 0]
    num_y = h[:, 1] - t * Fv[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(use_x, num_x / denom_x, num_y / denom_y)
    ok = ((t >= -1e-6) & (t <= 1.0 + 1e-6)
          & (s >= -1e-6) & (s <= 1.0 + 1e-6)
          & np.isfinite(s) & np.isfinite(t))
    return np.clip(s, 0.0, 1.0), np.clip(t, 0.0, 1.0), ok


def backward_warp(tgt: ImageBuffer, mesh: WarpMesh, H_inf: Mat3, canvas: Canvas) -> ImageBuffer:
    """Resample the target through the displacement mesh onto the canvas.

    For every canvas pixel inside a valid quad the bilinear quad map is
    inverted to recover the warped-plane position, which is then pulled back
    through H_inf and sampled bilinearly. Pixels outside all valid quads, in
    flipped quads, or sampling outside the target raster stay masked out.
    """
    Hi = np.linalg.inv(H_inf)
    h_out, w_out = canvas.height, canvas.width
    chans = 1 if tgt.channels == 1 else 3
    acc = np.zeros((h_out, w_out, chans))
    out_mask = np.zeros((h_out, w_out), dtype=bool)
    tgt_f = tgt.to_float()
    tgt_m = tgt.mask.astype(np.float64)
    nv, nu = mesh.positions.shape[:2]
    sp = mesh.spacing

    def sample_and_store(px_x, px_y, p_warped):
        """p_warped: (N, 2) warped-plane coords for canvas pixels (px_x, px_y)."""
        w3 = p_warped @ Hi[2, :2] + Hi[2, 2]
        good = w3 > 1e-9
        if not np.any(good):
            return
        px_x, px_y, p = px_x[good], px_y[good], p_warped[good]
        w3 = w3[good]
        sx = (p @ Hi[0, :2] + Hi[0, 2]) / w3
        sy = (p @ Hi[1, :2] + Hi[1, 2]) / w3
        vals, inside = bilinear_sample(tgt_f, sx, sy)
        mvals, _ = bilinear_sample(tgt_m, sx, sy)
        keep = inside & (mvals > 0.999)
        if not np.any(keep):
            return
        acc[px_y[keep], px_x[keep]] = vals[keep]
        out_mask[px_y[keep], px_x[keep]] = True

    # pass 1: undisplaced region of the mesh in one vectorized shot. Quads
    # whose four corners carry no displacement map canvas pixels straight to
    # p = q + offset.
    zero_ok = (~mesh.quad_displaced) & mesh.quad_valid
    if np.any(zero_ok):
        ys, xs = np.mgrid[0:h_out, 0:w_out]
        xs = xs.ravel()
        ys = ys.ravel()
        rx = xs + canvas.offset[0] - mesh.warped_origin[0]
        ry = ys + canvas.offset[1] - mesh.warped_origin[1]
        ci = np.floor(rx / sp).astype(np.int64)
        cj = np.floor(ry / sp).astype(np.int64)
        inb = (ci >= 0) & (ci < nu - 1) & (cj >= 0) & (cj < nv - 1)
        pick = np.zeros(len(xs), dtype=bool)
        pick[inb] = zero_ok[cj[inb], ci[inb]]
        if np.any(pick):
            p = np.column_stack([xs[pick] + canvas.offset[0], ys[pick] + canvas.offset[1]]).astype(np.float64)
            sample_and_store(xs[pick], ys[pick], p)

    # pass 2: displaced quads, batched; pixel candidates from every quad's
    # bounding box are inverted in one vectorized sweep per batch. Flat
    # writes keep the row-major quad order, so overlapping candidates
    # resolve exactly as the sequential loop would.
    disp_idx = np.argwhere(mesh.quad_displaced & mesh.quad_valid)
    pos = mesh.positions
    batch = 4096
    for lo in range(0, len(disp_idx), batch):
        cj = disp_idx[lo:lo + batch, 0]
        ci = disp_idx[lo:lo + batch, 1]
        q00 = pos[cj, ci]
        q10 = pos[cj, ci + 1]
        q01 = pos[cj + 1, ci]
        q11 = pos[cj + 1, ci + 1]
        corners = np.stack([q00, q10, q01, q11], axis=1)
        xs0 = np.maximum(np.floor(corners[:, :, 0].min(axis=1)).astype(np.int64), 0)
        xs1 = np.minimum(np.ceil(corners[:, :, 0].max(axis=1)).astype(np.int64), w_out - 1)
        ys0 = np.maximum(np.floor(corners[:, :, 1].min(axis=1)).astype(np.int64), 0)
        ys1 = np.minimum(np.ceil(corners[:, :, 1].max(axis=1)).astype(np.int64), h_out - 1)
        bw = np.maximum(xs1 - xs0 + 1, 0)
        bh = np.maximum(ys1 - ys0 + 1, 0)
        counts = bw * bh
        keep = counts > 0
        if not np.any(keep):
            continue
        (cj, ci, q00, q10, q01, q11, xs0, ys0, bw, counts) = (
            a[keep] for a in (cj, ci, q00, q10, q01, q11, xs0, ys0, bw, counts))
        total = int(counts.sum())
        qid = np.repeat(np.arange(len(counts)), counts)
        offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        gx = xs0[qid] + offs % bw[qid]
        gy = ys0[qid] + offs // bw[qid]
        q = np.column_stack([gx, gy]).astype(np.float64)
        s, t, ok = _inverse_bilinear(q, q00[qid], q10[qid], q01[qid], q11[qid])
        if not np.any(ok):
            continue
        # forward check: accepted (s, t) must reproduce the pixel
        sk, tk = s[ok], t[ok]
        fwd = (((1 - sk) * (1 - tk))[:, None] * q00[qid[ok]]
               + (sk * (1 - tk))[:, None] * q10[qid[ok]]
               + ((1 - sk) * tk)[:, None] * q01[qid[ok]]
               + (sk * tk)[:, None] * q11[qid[ok]])
        good = np.abs(fwd - q[ok]).max(axis=1) <= 1e-3
        sel = np.flatnonzero(ok)[good]
        if sel.size == 0:
            continue
        p = np.column_stack([
            mesh.warped_origin[0] + (ci[qid[sel]] + s[sel]) * sp,
            mesh.warped_origin[1] + (cj[qid[sel]] + t[sel]) * sp,
        ])
        sample_and_store(gx[sel], gy[sel], p)

    data = acc[:, :, 0] if chans == 1 else acc
    return ImageBuffer.from_array(np.clip(np.round(data), 0, 255).astype(np.uint8), out_mask)


def _l1_distance_to_invalid(mask: np.ndarray) -> np.ndarray:
    """Exact L1 distance to the nearest invalid pixel, counting the region
    just outside the raster as invalid. Zero on invalid pixels."""
    h, w = mask.shape
    big = float(h + w + 2)
    d = np.where(mask, big, 0.0)
    # exact vertical 1D transform per column
    for i in range(1, h):
        np.minimum(d[i], d[i - 1] + 1.0, out=d[i])
    for i in range(h - 2, -1, -1):
        np.minimum(d[i], d[i + 1] + 1.0, out=d[i])
    # raster border
    rows = np.arange(h, dtype=np.float64)[:, None]
    np.minimum(d, rows + 1.0, out=d)
    np.minimum(d, h - rows, out=d)
    # exact horizontal pass via running minima of d[k] -+ k
    cols = np.arange(w, dtype=np.float64)
    left = np.minimum.accumulate(d - cols, axis=1) + cols
    right = (np.minimum.accumulate((d + cols)[:, ::-1], axis=1))[:, ::-1] - cols
    d = np.minimum(left, right)
    np.minimum(d, cols + 1.0, out=d)
    np.minimum(d, w - cols, out=d)
    return np.where(mask, d, 0.0)


def linear_blend(ref_on_canvas: ImageBuffer, warped_tgt: ImageBuffer) -> ImageBuffer:
    """Feathered linear blend of two canvas-aligned sources.

    Weights are the L1 distance to each source's nearest invalid pixel, so
    seams fade toward mask borders; regions covered by a single source are
    copied through unchanged.
    """
    if ref_on_canvas.data.shape[:2] != warped_tgt.data.shape[:2]:
        raise ValueError("canvas dimensions differ")
    mr = ref_on_canvas.mask
    mt = warped_tgt.mask
    fr = ref_on_canvas.to_float()
    ft = warped_tgt.to_float()
    wr = _l1_distance_to_invalid(mr)
    wt = _l1_distance_to_invalid(mt)
    both = mr & mt
    out = np.zeros_like(fr)
    out[mr & ~mt] = fr[mr & ~mt]
    out[mt & ~mr] = ft[mt & ~mr]
    if np.any(both):
        wsum = wr[both] + wt[both]
        out[both] = (fr[both] * wr[both, None] + ft[both] * wt[both, None]) / wsum[:, None]
    data = out[:, :, 0] if ref_on_canvas.channels == 1 else out
    return ImageBuffer.from_array(np.clip(np.round(data), 0, 255).astype(np.uint8), mr | mt)


@dataclass
class StitchResult:
    panorama: ImageBuffer
    ref_mask: np.ndarray
    tgt_mask: np.ndarray
    calibration: StereoCalibration | None
    model: EDFModel | TPSModel
    grid: DisplacementGrid
    canvas: Canvas
    homography: Mat3                      # H_inf, or the fallback homography
    ref_layer: ImageBuffer | None = None   # reference placed on the canvas
    tgt_layer: ImageBuffer | None = None   # warped target on the canvas
    inliers: Correspondences | None = None
    refine_info: RefineInfo | None = None
    diagnostics: dict = field(default_factory=dict)

    def map_target_points(self, pts: np.ndarray) -> np.ndarray:
        """Full stitch mapping of target-image points into reference-frame
        coordinates (the same map the warper applies to pixels)."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        q = np.column_stack([pts, np.ones(len(pts))]) @ self.homography.T
        p = q[:, :2] / q[:, 2:3]
        return p + self.grid.displacement_at(p)


def _warped_target_bbox(tgt_size: tuple[int, int], H: Mat3,
                        samples_per_edge: int = 64) -> tuple[float, float, float, float]:
    """Bounding box of the H-image of the target rectangle, ignoring points
    that map too close to (or behind) the plane at infinity."""
    w, h = tgt_size
    ts = np.linspace(0.0, 1.0, samples_per_edge)
    edges = [
        np.column_stack([ts * w, np.zeros_like(ts)]),
        np.column_stack([ts * w, np.full_like(ts, h)]),
        np.column_stack([np.zeros_like(ts), ts * h]),
        np.column_stack([np.full_like(ts, w), ts * h]),
    ]
    pts = np.vstack(edges)
    q = np.column_stack([pts, np.ones(len(pts))]) @ H.T
    ok = q[:, 2] >= 1e-6
    if not np.any(ok):
        raise ExcessiveCanvas("target rectangle maps entirely behind the camera")
    mapped = q[ok, :2] / q[ok, 2:3]
    return (float(mapped[:, 0].min()), float(mapped[:, 1].min()),
            float(mapped[:, 0].max()), float(mapped[:, 1].max()))


def stitch(ref: ImageBuffer, tgt: ImageBuffer, corrs: Correspondences,
           cfg: PipelineConfig | None = None) -> StitchResult:
    """End-to-end two-view stitch.

    Estimates the epipolar geometry, refines the infinite homography, fits
    the epipolar displacement field and composites the warped target over
    the reference with feathered blending. Degenerate geometry (planar scene
    or pure rotation) switches to a global-homography warp with a plain
    thin-plate residual field; ``diagnostics['fallback']`` records it.
    """
    cfg = cfg or PipelineConfig()
    diag: dict = {"n_matches": len(corrs)}

    calibration = None
    refine_info = None
    fallback = False
    try:
        F, inlier_mask = estimate_fundamental_ransac(corrs, cfg.ransac)
        inliers = corrs.subset(inlier_mask)
        diag["n_inliers"] = len(inliers)
        K = initial_intrinsics(tgt.width, tgt.height, cfg.focal_hint)
        Kp = initial_intrinsics(ref.width, ref.height, cfg.focal_hint)
        motion = rotation_from_F(F, K, Kp, inliers)
        e, ep = epipoles_from_F(F)
        init = StereoCalibration(K=K, Kp=Kp, motion=motion, F=F, e=e, ep=ep,
                                 H_inf=infinite_homography(K, Kp, motion))
        calibration, refine_info = refine_calibration(init, inliers, cfg.refine)
        skew_res, axis_err = compatibility_residual(calibration.H_inf, F)
        diag.update(objective_initial=refine_info.objective_initial,
                    objective_final=refine_info.objective_final,
                    skew_res=skew_res, axis_err=axis_err,
                    refine_converged=float(refine_info.converged))
        H = calibration.H_inf
        residuals = compute_residuals(H, inliers)
        diag["n_points_at_infinity"] = residuals.n_at_infinity
        model = fit_edf(residuals, calibration.ep, cfg.edf)
    except (DegenerateGeometry, EpipoleAtInfinity) as exc:
        fallback = True
        diag["fallback_reason"] = str(exc)
        mask = getattr(exc, "inlier_mask", None)
        H = getattr(exc, "homography", None)
        if mask is None:
            mask = np.ones(len(corrs), dtype=bool)
        inliers = corrs.subset(mask)
        diag["n_inliers"] = len(inliers)
        if H is None:
            H = fit_homography_dlt(inliers)
        residuals = compute_residuals(H, inliers)
        diag["n_points_at_infinity"] = residuals.n_at_infinity
        model = fit_tps(residuals, cfg.edf)
    diag["fallback"] = float(fallback)

    misfit = np.linalg.norm(model.displacement(residuals.centers) - residuals.values, axis=1)
    diag["mean_control_misfit"] = float(misfit.mean())
    diag["max_control_misfit"] = float(misfit.max())

    ref_rect = (0.0, 0.0, float(ref.width), float(ref.height))
    bbox = _warped_target_bbox((tgt.width, tgt.height), H)
    union_w = max(bbox[2], ref_rect[2]) - min(bbox[0], 0.0)
    union_h = max(bbox[3], ref_rect[3]) - min(bbox[1], 0.0)
    if union_w * union_h > cfg.warp.canvas_cap * ref.width * ref.height:
        raise ExcessiveCanvas(
            f"stitching area {union_w:.0f}x{union_h:.0f} exceeds the cap"
        )
    grid = build_displacement_grid(model, bbox, ref_rect, cfg.edf)
    canvas = compute_canvas((ref.width, ref.height), (tgt.width, tgt.height),
                            H, grid, cfg.warp.canvas_cap)
    mesh = build_warp_mesh(grid, canvas)
    warped = backward_warp(tgt, mesh, H, canvas)
    diag["n_warped_px"] = float(warped.mask.sum())

    ref_canvas = ImageBuffer.zeros(canvas.width, canvas.height, ref.channels)
    ox, oy = canvas.offset
    ref_canvas.data[-oy:-oy + ref.height, -ox:-ox + ref.width] = ref.data
    ref_canvas.mask[-oy:-oy + ref.height, -ox:-ox + ref.width] = ref.mask

    diag["empty_overlap"] = float(not np.any(ref_canvas.mask & warped.mask))
    pano = linear_blend(ref_canvas, warped)
    diag["canvas_width"] = float(canvas.width)
    diag["canvas_height"] = float(canvas.height)

    return StitchResult(
        panorama=pano,
        ref_mask=ref_canvas.mask,
        tgt_mask=warped.mask,
        calibration=calibration,
        model=model,
        grid=grid,
        canvas=canvas,
        homography=H,
        ref_layer=ref_canvas,
        tgt_layer=warped,
        inliers=inliers,
        refine_info=refine_info,
        diagnostics=diag,
    )
