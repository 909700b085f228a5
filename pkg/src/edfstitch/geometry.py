"""Two-view epipolar geometry: homogeneous primitives, fundamental-matrix
estimation, epipoles, epipolar lines and plane-induced homographies.

Conventions used throughout the package:

- image points are float64 pixel coordinates, origin at the top-left;
- a correspondence pairs ``src`` (a point in the target image, the one that
  gets warped) with ``dst`` (its match in the reference image);
- the fundamental matrix satisfies ``dst_h^T @ F @ src_h = 0``;
- estimated F is normalized to rank 2, unit Frobenius norm, and a positive
  first nonzero entry in row-major order so matrices can be compared directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry, DegeneratePlane, InsufficientMatches, ScaleMismatch

Mat3 = np.ndarray  # 3x3 float64
Vec3 = np.ndarray  # (3,) float64


def homogenize(pts: np.ndarray) -> np.ndarray:
    """(N,2) pixel coordinates -> (N,3) homogeneous with third entry 1."""
    pts = np.asarray(pts, dtype=np.float64)
    return np.hstack([pts, np.ones((pts.shape[0], 1))])


def dehomogenize(pts_h: np.ndarray) -> np.ndarray:
    """(N,3) homogeneous -> (N,2) inhomogeneous. Caller guards near-zero w."""
    pts_h = np.asarray(pts_h, dtype=np.float64)
    return pts_h[:, :2] / pts_h[:, 2:3]


def skew_sym(v: Vec3) -> Mat3:
    """Cross-product matrix [v]x with [v]x @ u = v x u."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def rotation_from_axis_angle(r: Vec3) -> Mat3:
    """Rodrigues formula; r is axis * angle in radians."""
    r = np.asarray(r, dtype=np.float64)
    angle = float(np.linalg.norm(r))
    if angle < 1e-12:
        return np.eye(3) + skew_sym(r)
    k = skew_sym(r / angle)
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def axis_angle_from_rotation(R: Mat3) -> Vec3:
    """Inverse of :func:`rotation_from_axis_angle` for angles in [0, pi)."""
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = math.acos(float(c))
    if angle < 1e-12:
        return np.zeros(3)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle > math.pi - 1e-6:
        # near pi the off-diagonal difference loses the axis; recover it from
        # the symmetric part instead
        B = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(B), 0.0))
        axis *= np.sign(np.array([v[0] if v[0] else 1.0, v[1] if v[1] else 1.0, v[2] if v[2] else 1.0]))
        n = np.linalg.norm(axis)
        if n < 1e-12:
            return np.zeros(3)
        return axis / n * angle
    return v / (2.0 * math.sin(angle)) * angle


@dataclass
class CameraIntrinsics:
    """Pinhole intrinsics with square pixels, zero skew."""

    f: float
    cx: float
    cy: float

    def matrix(self) -> Mat3:
        return np.array([[self.f, 0.0, self.cx], [0.0, self.f, self.cy], [0.0, 0.0, 1.0]])

    def inv_matrix(self) -> Mat3:
        return np.array([
            [1.0 / self.f, 0.0, -self.cx / self.f],
            [0.0, 1.0 / self.f, -self.cy / self.f],
            [0.0, 0.0, 1.0],
        ])


@dataclass
class RigidMotion:
    """Rotation plus unit translation direction of the reference camera
    relative to the target camera (scale is unrecoverable from two views)."""

    R: Mat3
    t: Vec3


@dataclass
class PlaneParams:
    """World plane n^T X + d = 0 (n need not be unit length)."""

    n: Vec3
    d: float


@dataclass
class Correspondences:
    """Matched point sets; ``src`` in the target image, ``dst`` in the
    reference image. Row i of each array is one correspondence."""

    src: np.ndarray  # (N, 2)
    dst: np.ndarray  # (N, 2)

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.float64).reshape(-1, 2)
        self.dst = np.asarray(self.dst, dtype=np.float64).reshape(-1, 2)
        if self.src.shape != self.dst.shape:
            raise ValueError("src and dst must have the same shape")

    def __len__(self) -> int:
        return self.src.shape[0]

    def subset(self, mask: np.ndarray) -> "Correspondences":
        return Correspondences(self.src[mask], self.dst[mask])

    @property
    def src_h(self) -> np.ndarray:
        return homogenize(self.src)

    @property
    def dst_h(self) -> np.ndarray:
        return homogenize(self.dst)


@dataclass
class RansacConfig:
    threshold: float = 1.0       # Sampson distance, px
    confidence: float = 0.995
    max_iters: int = 2000
    seed: int = 0
    # fraction of F-inliers that must fit a single homography to declare
    # the geometry degenerate (planar scene / pure rotation)
    degeneracy_fraction: float = 0.95


def normalize_fundamental(F: Mat3) -> Mat3:
    """Force rank 2, unit Frobenius norm and the sign convention."""
    U, s, Vt = np.linalg.svd(np.asarray(F, dtype=np.float64))
    s = s.copy()
    s[2] = 0.0
    F = U @ np.diag(s) @ Vt
    norm = np.linalg.norm(F)
    if norm < 1e-300:
        raise DegenerateGeometry("zero fundamental matrix")
    F = F / norm
    flat = F.ravel()
    nonzero = np.nonzero(np.abs(flat) > 1e-12)[0]
    if nonzero.size and flat[nonzero[0]] < 0:
        F = -F
    return F


def _hartley_normalization(pts: np.ndarray) -> tuple[np.ndarray, Mat3]:
    """Translate centroid to the origin, scale RMS radius to sqrt(2)."""
    c = pts.mean(axis=0)
    centered = pts - c
    rms = math.sqrt(float(np.mean(np.sum(centered**2, axis=1))))
    if rms < 1e-12:
        raise DegenerateGeometry("all points coincide")
    s = math.sqrt(2.0) / rms
    T = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return centered * s, T


def eight_point(corrs: Correspondences) -> Mat3:
    """Normalized eight-point estimate of F from >= 8 correspondences.

    Least-squares over all rows of the epipolar constraint, rank-2
    projection, then the package normalization convention.
    """
    if len(corrs) < 8:
        raise InsufficientMatches(f"eight-point needs >= 8 matches, got {len(corrs)}")
    a, T1 = _hartley_normalization(corrs.src)
    b, T2 = _hartley_normalization(corrs.dst)
    n = len(corrs)
    A = np.empty((n, 9))
    A[:, 0] = b[:, 0] * a[:, 0]
    A[:, 1] = b[:, 0] * a[:, 1]
    A[:, 2] = b[:, 0]
    A[:, 3] = b[:, 1] * a[:, 0]
    A[:, 4] = b[:, 1] * a[:, 1]
    A[:, 5] = b[:, 1]
    A[:, 6] = a[:, 0]
    A[:, 7] = a[:, 1]
    A[:, 8] = 1.0
    _, _, Vt = np.linalg.svd(A)
    Fn = Vt[-1].reshape(3, 3)
    F = T2.T @ Fn @ T1
    return normalize_fundamental(F)


def sampson_distance(F: Mat3, corrs: Correspondences) -> np.ndarray:
    """First-order geometric distance to the epipolar constraint, px, per
    correspondence. Returns +inf where all four denominator terms vanish."""
    x1 = corrs.src_h
    x2 = corrs.dst_h
    Fx = x1 @ F.T
    Ftx = x2 @ F
    num = np.abs(np.einsum("ij,ij->i", x2, Fx))
    terms = np.stack([Fx[:, 0] ** 2, Fx[:, 1] ** 2, Ftx[:, 0] ** 2, Ftx[:, 1] ** 2])
    den = terms.sum(axis=0)
    dead = terms.max(axis=0) < 1e-18
    out = np.full(len(corrs), np.inf)
    ok = ~dead
    out[ok] = num[ok] / np.sqrt(den[ok])
    return out


def fit_homography_dlt(corrs: Correspondences) -> Mat3:
    """Global homography src -> dst by normalized DLT (least squares)."""
    if len(corrs) < 4:
        raise InsufficientMatches("homography needs >= 4 matches")
    a, T1 = _hartley_normalization(corrs.src)
    b, T2 = _hartley_normalization(corrs.dst)
    n = len(corrs)
    A = np.zeros((2 * n, 9))
    A[0::2, 0] = -a[:, 0]
    A[0::2, 1] = -a[:, 1]
    A[0::2, 2] = -1.0
    A[0::2, 6] = a[:, 0] * b[:, 0]
    A[0::2, 7] = a[:, 1] * b[:, 0]
    A[0::2, 8] = b[:, 0]
    A[1::2, 3] = -a[:, 0]
    A[1::2, 4] = -a[:, 1]
    A[1::2, 5] = -1.0
    A[1::2, 6] = a[:, 0] * b[:, 1]
    A[1::2, 7] = a[:, 1] * b[:, 1]
    A[1::2, 8] = b[:, 1]
    _, _, Vt = np.linalg.svd(A)
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(T2) @ Hn @ T1
    if abs(H[2, 2]) > 1e-12:
        H = H / H[2, 2]
    return H


def homography_transfer_error(H: Mat3, corrs: Correspondences) -> np.ndarray:
    """Forward transfer error ||proj(H src) - dst|| in px (+inf behind)."""
    q = corrs.src_h @ H.T
    err = np.full(len(corrs), np.inf)
    ok = np.abs(q[:, 2]) > 1e-12
    d = q[ok, :2] / q[ok, 2:3] - corrs.dst[ok]
    err[ok] = np.hypot(d[:, 0], d[:, 1])
    return err


def estimate_fundamental_ransac(
    corrs: Correspondences, cfg: RansacConfig | None = None
) -> tuple[Mat3, np.ndarray]:
    """Robust fundamental-matrix estimation.

    MLESAC-style scoring (truncated squared Sampson distance) over seeded
    eight-point hypotheses with an adaptive iteration count, followed by
    re-estimation on the inlier set.

    Returns:
        (F, inlier_mask) with F satisfying the normalization invariants and
        every masked correspondence within ``cfg.threshold`` Sampson px of F.

    Raises:
        InsufficientMatches: fewer than 8 input matches or 8 surviving inliers.
        DegenerateGeometry: the inlier set is homography-consistent; the
            exception carries the fitted homography and the mask.
    """
    cfg = cfg or RansacConfig()
    n = len(corrs)
    if n < 8:
        raise InsufficientMatches(f"need >= 8 matches, got {n}")

    rng = np.random.default_rng(cfg.seed)
    t2 = cfg.threshold**2
    best_cost = math.inf
    best_mask: np.ndarray | None = None
    needed = cfg.max_iters
    it = 0
    while it < needed:
        it += 1
        sample = rng.choice(n, size=8, replace=False)
        try:
            F = eight_point(corrs.subset(sample))
        except (DegenerateGeometry, np.linalg.LinAlgError):
            continue
        d = sampson_distance(F, corrs)
        cost = float(np.minimum(d * d, t2).sum())
        if cost < best_cost:
            best_cost = cost
            best_mask = d <= cfg.threshold
            w = float(best_mask.mean())
            if w > 0.9999:
                break
            denom = math.log(max(1.0 - w**8, 1e-12))
            needed = min(needed, max(it, int(math.ceil(math.log(1.0 - cfg.confidence) / denom))))

    if best_mask is None or int(best_mask.sum()) < 8:
        raise InsufficientMatches("RANSAC found fewer than 8 inliers")

    # re-estimate on inliers until the mask stabilizes
    mask = best_mask
    F = eight_point(corrs.subset(mask))
    for _ in range(2):
        new_mask = sampson_distance(F, corrs) <= cfg.threshold
        if int(new_mask.sum()) < 8:
            raise InsufficientMatches("inlier set collapsed during re-estimation")
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
        F = eight_point(corrs.subset(mask))
    mask = sampson_distance(F, corrs) <= cfg.threshold
    if int(mask.sum()) < 8:
        raise InsufficientMatches("inlier set collapsed during re-estimation")

    _check_homography_degeneracy(corrs, mask, cfg)
    return F, mask


def _check_homography_degeneracy(corrs: Correspondences, mask: np.ndarray, cfg: RansacConfig):
    """Planar-scene / pure-rotation guard: if nearly all F-inliers fit one
    homography the epipolar geometry is unusable downstream."""
    inliers = corrs.subset(mask)
    try:
        H = fit_homography_dlt(inliers)
    except (InsufficientMatches, np.linalg.LinAlgError):
        return
    err = homography_transfer_error(H, inliers)
    frac = float((err < cfg.threshold).mean())
    if frac >= cfg.degeneracy_fraction:
        raise DegenerateGeometry(
            f"{frac:.1%} of inliers are homography-consistent",
            homography=H,
            inlier_mask=mask,
        )


def epipoles_from_F(F: Mat3) -> tuple[Vec3, Vec3]:
    """Unit-norm epipoles (e, e') with F e = 0 and F^T e' = 0.

    Sign is canonicalized (largest-magnitude component positive) so repeated
    calls are directly comparable.
    """
    U, s, Vt = np.linalg.svd(np.asarray(F, dtype=np.float64))
    if s[2] > 1e-9 * s[0]:
        raise DegenerateGeometry("matrix has full rank; no epipole")
    if s[1] <= 1e-9 * s[0]:
        raise DegenerateGeometry("rank < 2; null space is not unique")
    e = Vt[2]
    ep = U[:, 2]
    e = e / np.linalg.norm(e)
    ep = ep / np.linalg.norm(ep)
    if e[np.argmax(np.abs(e))] < 0:
        e = -e
    if ep[np.argmax(np.abs(ep))] < 0:
        ep = -ep
    return e, ep


def epipolar_line(F: Mat3, x: Vec3, side: str = "in_reference") -> Vec3:
    """Epipolar line (a, b, c) with a^2 + b^2 = 1.

    side="in_reference": x is a target-image point, returns the line F x in
    the reference image. side="in_target": x is a reference-image point,
    returns F^T x in the target image.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape == (2,):
        x = np.array([x[0], x[1], 1.0])
    if side == "in_reference":
        line = F @ x
    elif side == "in_target":
        line = F.T @ x
    else:
        raise ValueError(f"unknown side {side!r}")
    norm = math.hypot(line[0], line[1])
    if norm < 1e-15:
        raise DegenerateGeometry("point maps to the zero line (an epipole)")
    return line / norm


def point_line_distance(line: Vec3, pts: np.ndarray) -> np.ndarray:
    """Signed distance of (N,2) points to a normalized line (a^2+b^2=1)."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    return pts @ line[:2] + line[2]


def plane_induced_homography(
    K: CameraIntrinsics, Kp: CameraIntrinsics, motion: RigidMotion, plane: PlaneParams
) -> Mat3:
    """H = K' (R - t n^T / d) K^{-1}, absolute scale retained."""
    if abs(plane.d) <= 1e-9:
        raise DegeneratePlane("plane contains the first camera center")
    inner = motion.R - np.outer(motion.t, plane.n) / plane.d
    return Kp.matrix() @ inner @ K.inv_matrix()


def rank1_epipolar_part(H: Mat3, H_inf: Mat3, eprime: Vec3) -> tuple[Vec3, float]:
    """Least-squares m with H ~= H_inf + e' m^T for a unit-norm epipole.

    Returns (m, residual) where residual is the Frobenius norm of the
    unexplained part. Raises ScaleMismatch when the two homographies are not
    on a common absolute scale (residual above 1e-3 * ||H||_F).
    """
    eprime = np.asarray(eprime, dtype=np.float64)
    D = np.asarray(H, dtype=np.float64) - np.asarray(H_inf, dtype=np.float64)
    m = D.T @ eprime / float(eprime @ eprime)
    residual = float(np.linalg.norm(D - np.outer(eprime, m)))
    if residual > 1e-3 * np.linalg.norm(H):
        raise ScaleMismatch(
            f"rank-1 fit residual {residual:.3e} exceeds 1e-3 * ||H||_F"
        )
    return m, residual
