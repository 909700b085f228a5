"""Command-line front end.

Subcommands::

    stitch REF TGT [--matches F] [--out P] [--calib-out P] [--metrics-out P]
                   [--model-out P] [--report-dir D] [--cell N] [--rho X]
                   [--focal F] [--seed S] ...
    synth    --spec F --out-dir D
    eval     --pano P --calib C --matches F [--ref R --tgt T] [--out P]
    estimate REF TGT --matches F --calib-out P

Exit codes: 0 success, 2 insufficient matches, 3 degenerate geometry
(including a failed fallback), 4 I/O or input-format error, 5 canvas cap
exceeded. Diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import io as eio
from .calibration import StereoCalibration, infinite_homography, initial_intrinsics, refine_calibration, rotation_from_F
from .config import PipelineConfig
from .edf import build_displacement_grid, compute_residuals, fit_edf
from .errors import (
    BoundsError,
    DegenerateGeometry,
    EmptyOverlap,
    EpipoleAtInfinity,
    ExcessiveCanvas,
    ExcessiveGrid,
    InsufficientMatches,
    InvalidSize,
    InvalidSpec,
    NoEvalPoints,
    ParseError,
    SingularSystem,
)
from .geometry import epipoles_from_F, estimate_fundamental_ransac, sampson_distance
from .image import ImageBuffer
from .matching import builtin_match
from .metrics import MetricsReport, overlap_mask, projectivity_metric, psnr, select_eval_points, ssim
from .synth import make_scene_pair
from .warp import StitchResult, stitch


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="edfstitch",
                                 description="parallax-tolerant two-view stitching")
    sub = ap.add_subparsers(dest="command", required=True)

    st = sub.add_parser("stitch", help="stitch a reference/target pair")
    st.add_argument("ref", help="reference image (stays unwarped)")
    st.add_argument("tgt", help="target image (warped onto the reference)")
    st.add_argument("--matches", help="matches JSON; omitted -> built-in matcher")
    st.add_argument("--out", help="output panorama PNG")
    st.add_argument("--calib-out", help="write calibration JSON here")
    st.add_argument("--metrics-out", help="write metrics JSON here")
    st.add_argument("--model-out", help="write the fitted field model JSON here")
    st.add_argument("--report-dir", help="write diagnostic figures and report.csv here")
    _add_pipeline_flags(st)

    sy = sub.add_parser("synth", help="generate a synthetic scene pair")
    sy.add_argument("--spec", required=True, help="scene spec JSON")
    sy.add_argument("--out-dir", required=True)

    ev = sub.add_parser("eval", help="evaluate stitching quality")
    ev.add_argument("--pano", required=True, help="stitched panorama PNG")
    ev.add_argument("--calib", required=True, help="calibration JSON")
    ev.add_argument("--matches", required=True, help="matches JSON")
    ev.add_argument("--ref", help="reference image (enables SSIM/PSNR)")
    ev.add_argument("--tgt", help="target image (enables SSIM/PSNR)")
    ev.add_argument("--out", help="metrics JSON path (default: stdout)")
    ev.add_argument("--report-dir", help="write diagnostic figures and report.csv here")
    _add_pipeline_flags(ev)

    es = sub.add_parser("estimate", help="estimate and refine the calibration only")
    es.add_argument("ref")
    es.add_argument("tgt")
    es.add_argument("--matches", required=True)
    es.add_argument("--calib-out", required=True)
    _add_pipeline_flags(es)
    return ap


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cell", type=int, default=None, help="grid cell size, px (default 10)")
    p.add_argument("--rho", type=float, default=None, help="field regularizer (default 8*pi)")
    p.add_argument("--lambda-scale", type=float, default=None,
                   help="multiplier on the regularizer")
    p.add_argument("--taper", type=float, default=None,
                   help="taper width as a multiple of the max residual (default 5)")
    p.add_argument("--focal", type=float, default=None, help="focal length hint, px")
    p.add_argument("--seed", type=int, default=None, help="RANSAC seed (default 0)")
    p.add_argument("--threshold", type=float, default=None,
                   help="RANSAC Sampson threshold, px (default 1.0)")
    p.add_argument("--eq4-literal", action="store_true",
                   help="use the literal first refinement term (no transpose)")


def _config_from_args(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if args.cell is not None:
        cfg.edf.cell_px = args.cell
    if args.rho is not None:
        cfg.edf.rho = args.rho
    if getattr(args, "lambda_scale", None) is not None:
        cfg.edf.lambda_scale = args.lambda_scale
    if args.taper is not None:
        cfg.edf.taper_factor = args.taper
    if args.focal is not None:
        cfg.focal_hint = args.focal
    if args.seed is not None:
        cfg.ransac.seed = args.seed
    if args.threshold is not None:
        cfg.ransac.threshold = args.threshold
    if args.eq4_literal:
        cfg.refine.eq4_literal = True
    return cfg


def _load_pair(args) -> tuple[ImageBuffer, ImageBuffer]:
    return eio.load_image(args.ref), eio.load_image(args.tgt)


def _corrs_for(args, ref: ImageBuffer, tgt: ImageBuffer):
    if args.matches:
        corrs, size1, size2 = eio.load_matches(args.matches)
        if (size1 != (ref.width, ref.height)) or (size2 != (tgt.width, tgt.height)):
            _log(f"warning: declared match sizes {size1}/{size2} differ from "
                 f"images {(ref.width, ref.height)}/{(tgt.width, tgt.height)}")
        return corrs
    _log("no --matches given; running the built-in matcher")
    return builtin_match(ref, tgt)


def _result_metrics(result: StitchResult, ref_size: tuple[int, int],
                    tgt_size: tuple[int, int]) -> MetricsReport:
    m = overlap_mask(result.ref_mask, result.tgt_mask)
    area = int(np.count_nonzero(result.ref_mask & result.tgt_mask))
    try:
        s = ssim(result.ref_layer, result.tgt_layer, m)
        p = psnr(result.ref_layer, result.tgt_layer, result.ref_mask & result.tgt_mask)
    except EmptyOverlap:
        s, p = 0.0, 0.0
    pm, px, n_pts = 0.0, 0.0, 0
    if result.calibration is not None and result.inliers is not None:

        def in_overlap(pts: np.ndarray) -> np.ndarray:
            # overlap proxy: mapped position inside the reference rectangle
            mapped = result.map_target_points(pts)
            return ((mapped[:, 0] >= 0) & (mapped[:, 1] >= 0)
                    & (mapped[:, 0] <= ref_size[0]) & (mapped[:, 1] <= ref_size[1]))

        try:
            pts = select_eval_points(result.calibration.F, result.inliers.dst,
                                     tgt_size, in_overlap)
            pm, px = projectivity_metric(result.calibration.F,
                                         result.map_target_points, pts)
            n_pts = len(pts)
        except NoEvalPoints:
            pass
    return MetricsReport(ssim=s, psnr=p, projectivity_mean_px=pm,
                         projectivity_max_px=px, n_eval_points=n_pts,
                         overlap_area_px=area)


def _cmd_stitch(args) -> int:
    cfg = _config_from_args(args)
    ref, tgt = _load_pair(args)
    corrs = _corrs_for(args, ref, tgt)
    result = stitch(ref, tgt, corrs, cfg)
    result.diagnostics["ref_width"] = float(ref.width)
    result.diagnostics["ref_height"] = float(ref.height)
    for key in ("n_inliers", "fallback", "mean_control_misfit", "skew_res"):
        if key in result.diagnostics:
            _log(f"{key} = {result.diagnostics[key]}")
    if args.out:
        eio.save_image(args.out, result.panorama)
        _log(f"wrote {args.out}")
    if args.calib_out:
        if result.calibration is not None:
            eio.save_calibration(args.calib_out, result.calibration)
            _log(f"wrote {args.calib_out}")
        else:
            _log("fallback path produced no calibration; skipping --calib-out")
    if args.model_out:
        eio.save_model_debug(args.model_out, result.model)
    metrics = None
    if args.metrics_out or args.report_dir:
        metrics = _result_metrics(result, (ref.width, ref.height),
                                  (tgt.width, tgt.height))
    if args.metrics_out:
        eio.save_metrics(args.metrics_out, metrics)
        _log(f"wrote {args.metrics_out}")
    if args.report_dir:
        from .report import render_report

        paths = render_report(args.report_dir, result, ref, tgt, corrs, metrics)
        _log(f"wrote {len(paths)} report files to {args.report_dir}")
    return 0


def _cmd_synth(args) -> int:
    spec = eio.load_scene_spec(args.spec)
    scene = make_scene_pair(spec)
    out = args.out_dir
    eio.save_image(f"{out}/ref.png", scene.ref)
    eio.save_image(f"{out}/tgt.png", scene.tgt)
    eio.save_matches(f"{out}/matches.json", scene.corrs,
                     (scene.ref.width, scene.ref.height),
                     (scene.tgt.width, scene.tgt.height))
    gt = scene.gt
    if gt.degenerate:
        _log("zero baseline: ground truth flagged degenerate; calibration "
             "JSON will carry null epipolar fields")
        doc = {"K": {"f": spec.K.f, "cx": spec.K.cx, "cy": spec.K.cy},
               "Kp": {"f": spec.Kp.f, "cx": spec.Kp.cx, "cy": spec.Kp.cy},
               "R": spec.motion.R.ravel().tolist(),
               "t": spec.motion.t.tolist(),
               "F": None, "e": None, "ep": None,
               "H_inf": gt.H_inf.ravel().tolist()}
        with open(f"{out}/calib.json", "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")
    else:
        t = spec.motion.t / np.linalg.norm(spec.motion.t)
        calib = StereoCalibration(K=spec.K, Kp=spec.Kp,
                                  motion=type(spec.motion)(R=spec.motion.R, t=t),
                                  F=gt.F, e=gt.e, ep=gt.ep, H_inf=gt.H_inf)
        eio.save_calibration(f"{out}/calib.json", calib)
    _log(f"wrote scene pair to {out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    pano = eio.load_image(args.pano)
    calib = eio.load_calibration(args.calib)
    corrs, size1, size2 = eio.load_matches(args.matches)
    d = sampson_distance(calib.F, corrs)
    inliers = corrs.subset(d <= cfg.ransac.threshold)
    if len(inliers) < 8:
        raise InsufficientMatches("fewer than 8 matches agree with the calibration")
    _log(f"{len(inliers)}/{len(corrs)} matches within "
         f"{cfg.ransac.threshold} px of the calibrated geometry")

    ref = eio.load_image(args.ref) if args.ref else None
    tgt = eio.load_image(args.tgt) if args.tgt else None
    ref_size = (ref.width, ref.height) if ref else tuple(size1)
    tgt_size = (tgt.width, tgt.height) if tgt else tuple(size2)

    residuals = compute_residuals(calib.H_inf, inliers)
    model = fit_edf(residuals, calib.ep, cfg.edf)

    from .warp import _warped_target_bbox, backward_warp, build_warp_mesh, compute_canvas

    bbox = _warped_target_bbox(tgt_size, calib.H_inf)
    ref_rect = (0.0, 0.0, float(ref_size[0]), float(ref_size[1]))
    grid = build_displacement_grid(model, bbox, ref_rect, cfg.edf)
    canvas = compute_canvas(ref_size, tgt_size, calib.H_inf, grid, cfg.warp.canvas_cap)
    if (canvas.width, canvas.height) != (pano.width, pano.height):
        _log(f"warning: panorama is {pano.width}x{pano.height} but the "
             f"calibration implies {canvas.width}x{canvas.height}")

    def map_points(pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        q = np.column_stack([pts, np.ones(len(pts))]) @ calib.H_inf.T
        p = q[:, :2] / q[:, 2:3]
        return p + grid.displacement_at(p)

    def in_overlap(pts: np.ndarray) -> np.ndarray:
        mapped = map_points(pts)
        return ((mapped[:, 0] >= 0) & (mapped[:, 1] >= 0)
                & (mapped[:, 0] <= ref_size[0]) & (mapped[:, 1] <= ref_size[1]))

    pm, px, n_pts = 0.0, 0.0, 0
    try:
        pts = select_eval_points(calib.F, inliers.dst, tgt_size, in_overlap)
        pm, px = projectivity_metric(calib.F, map_points, pts)
        n_pts = len(pts)
    except NoEvalPoints:
        _log("no epipolar line crosses the non-overlap region; "
             "projectivity metric skipped")

    s = p = 0.0
    area = 0
    if ref is not None and tgt is not None:
        mesh = build_warp_mesh(grid, canvas)
        warped = backward_warp(tgt, mesh, calib.H_inf, canvas)
        ref_canvas = ImageBuffer.zeros(canvas.width, canvas.height, ref.channels)
        ox, oy = canvas.offset
        ref_canvas.data[-oy:-oy + ref.height, -ox:-ox + ref.width] = ref.data
        ref_canvas.mask[-oy:-oy + ref.height, -ox:-ox + ref.width] = ref.mask
        both = ref_canvas.mask & warped.mask
        area = int(np.count_nonzero(both))
        try:
            s = ssim(ref_canvas, warped, overlap_mask(ref_canvas.mask, warped.mask))
            p = psnr(ref_canvas, warped, both)
        except EmptyOverlap:
            _log("empty overlap; SSIM/PSNR unavailable")
    else:
        _log("no --ref/--tgt images; SSIM/PSNR skipped")

    report = MetricsReport(ssim=s, psnr=p, projectivity_mean_px=pm,
                           projectivity_max_px=px, n_eval_points=n_pts,
                           overlap_area_px=area)
    if args.out:
        eio.save_metrics(args.out, report)
        _log(f"wrote {args.out}")
    else:
        json.dump(report.to_dict(), sys.stdout, indent=1)
        sys.stdout.write("\n")
    return 0


def _cmd_estimate(args) -> int:
    cfg = _config_from_args(args)
    ref, tgt = _load_pair(args)
    corrs = _corrs_for(args, ref, tgt)
    F, mask = estimate_fundamental_ransac(corrs, cfg.ransac)
    inliers = corrs.subset(mask)
    _log(f"{len(inliers)}/{len(corrs)} inliers")
    K = initial_intrinsics(tgt.width, tgt.height, cfg.focal_hint)
    Kp = initial_intrinsics(ref.width, ref.height, cfg.focal_hint)
    motion = rotation_from_F(F, K, Kp, inliers)
    e, ep = epipoles_from_F(F)
    init = StereoCalibration(K=K, Kp=Kp, motion=motion, F=F, e=e, ep=ep,
                             H_inf=infinite_homography(K, Kp, motion))
    calib, info = refine_calibration(init, inliers, cfg.refine)
    _log(f"objective {info.objective_initial:.4e} -> {info.objective_final:.4e} "
         f"in {info.n_iters} iterations (converged={info.converged})")
    eio.save_calibration(args.calib_out, calib)
    _log(f"wrote {args.calib_out}")
    return 0


_HANDLERS = {
    "stitch": _cmd_stitch,
    "synth": _cmd_synth,
    "eval": _cmd_eval,
    "estimate": _cmd_estimate,
}


def run_cli(argv: list[str] | None = None) -> int:
    """Parse arguments, dispatch, and map failures to stable exit codes."""
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except InsufficientMatches as exc:
        _log(f"error: {exc}")
        return 2
    except (DegenerateGeometry, EpipoleAtInfinity, SingularSystem) as exc:
        _log(f"error: degenerate geometry: {exc}")
        return 3
    except (ExcessiveCanvas, ExcessiveGrid) as exc:
        _log(f"error: {exc}")
        return 5
    except (ParseError, BoundsError, InvalidSpec, InvalidSize) as exc:
        _log(f"error: {exc}")
        return 4
    except OSError as exc:
        _log(f"I/O error: {exc}")
        return 4


def main() -> int:
    return run_cli()


if __name__ == "__main__":
    sys.exit(main())
