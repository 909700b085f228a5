"""Parallax-tolerant two-view image stitching with an epipolar displacement
field: epipolar geometry estimation, infinite-homography refinement,
thin-plate residual warping, blending, metrics and a synthetic oracle."""

from .calibration import (
    RefineConfig,
    RefineInfo,
    StereoCalibration,
    compatibility_residual,
    infinite_homography,
    initial_intrinsics,
    refine_calibration,
    rotation_from_F,
)
from .config import PipelineConfig, WarpConfig
from .edf import (
    DisplacementGrid,
    EDFConfig,
    EDFModel,
    ResidualField,
    TPSModel,
    build_displacement_grid,
    compute_residuals,
    fit_edf,
    fit_tps,
)
from .geometry import (
    CameraIntrinsics,
    Correspondences,
    PlaneParams,
    RansacConfig,
    RigidMotion,
    eight_point,
    epipolar_line,
    epipoles_from_F,
    estimate_fundamental_ransac,
    fit_homography_dlt,
    normalize_fundamental,
    plane_induced_homography,
    rank1_epipolar_part,
    sampson_distance,
)
from .image import ImageBuffer
from .matching import MatchConfig, builtin_match
from .metrics import MetricsReport, overlap_mask, projectivity_metric, psnr, select_eval_points, ssim
from .synth import GroundTruth, SceneData, SceneSpec, ground_truth_geometry, make_scene_pair
from .warp import (
    Canvas,
    StitchResult,
    WarpMesh,
    backward_warp,
    build_warp_mesh,
    compute_canvas,
    linear_blend,
    stitch,
)

__version__ = "0.1.0"
