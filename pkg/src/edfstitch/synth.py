"""Deterministic synthetic two-view scenes with exact ground truth.

Scenes consist of textured world planes plus optional free-space points. The
first camera sits at the world origin looking down +z and images the target
view; the second camera (rotated by R, translated by t) images the reference
view. Plane pixels are ray-cast against an analytic procedural texture, so
both renderings are exact and bitwise reproducible for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpec
from .geometry import (
    CameraIntrinsics,
    Correspondences,
    Mat3,
    PlaneParams,
    RigidMotion,
    Vec3,
    epipoles_from_F,
    normalize_fundamental,
    plane_induced_homography,
    skew_sym,
)
from .image import ImageBuffer


@dataclass
class SceneSpec:
    width: int
    height: int
    K: CameraIntrinsics
    Kp: CameraIntrinsics
    motion: RigidMotion                      # t at true scene scale here
    planes: list[PlaneParams] = field(default_factory=list)
    points_per_plane: int = 60
    free_points: int = 0
    free_depth_range: tuple[float, float] = (4.0, 10.0)
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    seed: int = 0
    margin: float = 6.0                      # keep samples away from borders


@dataclass
class GroundTruth:
    """Exact geometry of a rig; F is absent for a zero baseline."""

    H_inf: Mat3
    F: Mat3 | None
    e: Vec3 | None
    ep: Vec3 | None
    plane_H: list[Mat3] = field(default_factory=list)
    degenerate: bool = False


@dataclass
class SceneData:
    ref: ImageBuffer
    tgt: ImageBuffer
    corrs: Correspondences
    inlier_labels: np.ndarray   # bool, False rows are injected outliers
    gt: GroundTruth


def ground_truth_geometry(
    K: CameraIntrinsics,
    Kp: CameraIntrinsics,
    motion: RigidMotion,
    planes: list[PlaneParams] | None = None,
) -> GroundTruth:
    """F, epipoles, infinite homography and per-plane homographies from a rig.

    A zero baseline leaves F undefined; the result is flagged degenerate and
    carries only the homographies.
    """
    H_inf = Kp.matrix() @ motion.R @ K.inv_matrix()
    plane_H = []
    if planes:
        plane_H = [plane_induced_homography(K, Kp, motion, p) for p in planes]
    if float(np.linalg.norm(motion.t)) < 1e-12:
        return GroundTruth(H_inf=H_inf, F=None, e=None, ep=None,
                           plane_H=plane_H, degenerate=True)
    ep_h = Kp.matrix() @ motion.t
    F = normalize_fundamental(skew_sym(ep_h) @ H_inf)
    e, ep = epipoles_from_F(F)
    return GroundTruth(H_inf=H_inf, F=F, e=e, ep=ep, plane_H=plane_H)


# ---------------------------------------------------------------------------
# procedural texture: octaves of lattice value noise plus a softened checker,
# defined analytically on plane-local coordinates so both views sample the
# identical signal
# ---------------------------------------------------------------------------

def _lattice_hash(ix: np.ndarray, iy: np.ndarray, salt: int) -> np.ndarray:
    """Deterministic pseudo-random values in [0, 1) on integer lattice."""
    mix = (salt * 0x165667B19E3779F9) & 0xFFFFFFFFFFFFFFFF
    h = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
         ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
         ^ np.uint64(mix))
    h ^= h >> np.uint64(29)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(32)
    return (h & np.uint64(0xFFFFFFFF)).astype(np.float64) / float(0x100000000)


def _value_noise(x: np.ndarray, y: np.ndarray, salt: int) -> np.ndarray:
    ix = np.floor(x)
    iy = np.floor(y)
    fx = x - ix
    fy = y - iy
    sx = fx * fx * (3.0 - 2.0 * fx)
    sy = fy * fy * (3.0 - 2.0 * fy)
    ix = ix.astype(np.int64)
    iy = iy.astype(np.int64)
    v00 = _lattice_hash(ix, iy, salt)
    v10 = _lattice_hash(ix + 1, iy, salt)
    v01 = _lattice_hash(ix, iy + 1, salt)
    v11 = _lattice_hash(ix + 1, iy + 1, salt)
    top = v00 + sx * (v10 - v00)
    bot = v01 + sx * (v11 - v01)
    return top + sy * (bot - top)


def _plane_texture(a: np.ndarray, b: np.ndarray, salt: int) -> np.ndarray:
    """RGB float in [0, 255] for plane-local coordinates (world units)."""
    v = (0.50 * _value_noise(a / 0.45, b / 0.45, salt)
         + 0.30 * _value_noise(a / 0.22, b / 0.22, salt + 1)
         + 0.20 * _value_noise(a / 0.11, b / 0.11, salt + 2))
    checker = np.tanh(2.5 * np.sin(a * (2.0 * np.pi / 0.6)) * np.sin(b * (2.0 * np.pi / 0.6)))
    base = 118.0 + 96.0 * (v - 0.5) + 26.0 * checker
    rgb = np.stack([
        base + 18.0 * (v - 0.5),
        base,
        base - 14.0 * checker,
    ], axis=-1)
    return np.clip(rgb, 0.0, 255.0)


def _plane_basis(plane: PlaneParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Anchor point and in-plane orthonormal basis."""
    n = np.asarray(plane.n, dtype=np.float64)
    nn = n / np.linalg.norm(n)
    p0 = -plane.d * n / float(n @ n)
    helper = np.array([1.0, 0.0, 0.0]) if abs(nn[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    b1 = np.cross(nn, helper)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(nn, b1)
    return p0, b1, b2


def _render_view(
    K: CameraIntrinsics, R_cam: Mat3, c_cam: Vec3,
    width: int, height: int, planes: list[PlaneParams], seed: int,
) -> np.ndarray:
    """Ray-cast the plane set from a camera with center c and world-from-cam
    rotation R_cam; returns (H, W, 3) float RGB."""
    us, vs = np.meshgrid(np.arange(width, dtype=np.float64) + 0.0,
                         np.arange(height, dtype=np.float64) + 0.0)
    pix = np.stack([us.ravel(), vs.ravel(), np.ones(us.size)], axis=1)
    dirs = (pix @ K.inv_matrix().T) @ R_cam.T
    out = np.full((us.size, 3), (58.0, 62.0, 70.0))
    best_s = np.full(us.size, np.inf)
    for idx, plane in enumerate(planes):
        n = np.asarray(plane.n, dtype=np.float64)
        denom = dirs @ n
        num = -(plane.d + float(n @ c_cam))
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
        hit = (s > 1e-6) & (s < best_s)
        if not np.any(hit):
            continue
        X = c_cam + s[hit, None] * dirs[hit]
        p0, b1, b2 = _plane_basis(plane)
        rel = X - p0
        out[hit] = _plane_texture(rel @ b1, rel @ b2, seed * 17 + idx)
        best_s[hit] = s[hit]
    return out.reshape(height, width, 3)


def _project(K: CameraIntrinsics, R: Mat3, t: Vec3, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project world points; returns ((N,2) pixels, depth)."""
    Xc = X @ R.T + t
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = (Xc @ K.matrix().T)
        pix = pix[:, :2] / pix[:, 2:3]
    return pix, z


def scene_correspondences(spec: SceneSpec) -> tuple[Correspondences, np.ndarray, GroundTruth]:
    """Correspondences, outlier labels and ground truth without rendering."""
    rng = np.random.default_rng(spec.seed)
    corrs, labels = _sample_correspondences(spec, rng)
    return corrs, labels, ground_truth_geometry(spec.K, spec.Kp, spec.motion, spec.planes)


def _sample_correspondences(spec: SceneSpec, rng: np.random.Generator):
    K, Kp, motion = spec.K, spec.Kp, spec.motion
    w, h, m = spec.width, spec.height, spec.margin
    Kinv = K.inv_matrix()

    def sample_points(count: int, plane: PlaneParams | None) -> np.ndarray:
        pts = []
        attempts = 0
        while len(pts) < count and attempts < 400 * max(count, 1):
            attempts += 1
            u = rng.uniform(m, w - m)
            v = rng.uniform(m, h - m)
            ray = Kinv @ np.array([u, v, 1.0])
            if plane is not None:
                denom = float(np.asarray(plane.n) @ ray)
                if abs(denom) < 1e-12:
                    continue
                s = -plane.d / denom
            else:
                s = rng.uniform(*spec.free_depth_range)
            if s <= 0.05:
                continue
            X = s * ray
            pix2, z2 = _project(Kp, motion.R, motion.t, X[None, :])
            if z2[0] <= 0.05:
                continue
            if not (m <= pix2[0, 0] < w - m and m <= pix2[0, 1] < h - m):
                continue
            pts.append(X)
        if len(pts) < count:
            raise InvalidSpec(
                f"could not place {count} points visible in both views"
            )
        return np.array(pts)

    chunks = []
    for plane in spec.planes:
        if spec.points_per_plane > 0:
            chunks.append(sample_points(spec.points_per_plane, plane))
    if spec.free_points > 0:
        chunks.append(sample_points(spec.free_points, None))
    if not chunks:
        raise InvalidSpec("scene has no points")
    X = np.vstack(chunks)

    x1, _ = _project(K, np.eye(3), np.zeros(3), X)
    x2, _ = _project(Kp, motion.R, motion.t, X)
    if spec.noise_sigma > 0:
        x1 = x1 + rng.normal(0.0, spec.noise_sigma, x1.shape)
        x2 = x2 + rng.normal(0.0, spec.noise_sigma, x2.shape)
    labels = np.ones(len(x1), dtype=bool)

    if spec.outlier_fraction > 0:
        n_out = int(round(spec.outlier_fraction / (1.0 - spec.outlier_fraction) * len(x1)))
        if n_out:
            o1 = np.column_stack([rng.uniform(m, w - m, n_out), rng.uniform(m, h - m, n_out)])
            o2 = np.column_stack([rng.uniform(m, w - m, n_out), rng.uniform(m, h - m, n_out)])
            x1 = np.vstack([x1, o1])
            x2 = np.vstack([x2, o2])
            labels = np.concatenate([labels, np.zeros(n_out, dtype=bool)])

    # correspondences map target (src) to reference (dst)
    return Correspondences(src=x1, dst=x2), labels


def make_scene_pair(spec: SceneSpec) -> SceneData:
    """Render both views and produce labeled correspondences.

    Points are exact projections of plane / free-space samples visible in
    both frusta; optional Gaussian noise and uniformly distributed outliers
    are applied afterwards. Identical specs yield bitwise-identical scenes.
    """
    rng = np.random.default_rng(spec.seed)
    corrs, labels = _sample_correspondences(spec, rng)
    gt = ground_truth_geometry(spec.K, spec.Kp, spec.motion, spec.planes)

    w, h = spec.width, spec.height
    tgt_rgb = _render_view(spec.K, np.eye(3), np.zeros(3), w, h, spec.planes, spec.seed)
    # reference camera: world center -R^T t, cam-to-world rotation R^T
    c2 = -spec.motion.R.T @ spec.motion.t
    ref_rgb = _render_view(spec.Kp, spec.motion.R.T, c2, w, h, spec.planes, spec.seed)

    return SceneData(
        ref=ImageBuffer.from_array(ref_rgb),
        tgt=ImageBuffer.from_array(tgt_rgb),
        corrs=corrs,
        inlier_labels=labels,
        gt=gt,
    )
