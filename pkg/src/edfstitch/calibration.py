"""Uncalibrated-rig bootstrap: intrinsics guess, rotation recovery from the
fundamental matrix, and refinement of the infinite homography.

The refinement minimizes a first-order geometric error whose both terms
vanish exactly when ``H_inf^T F`` is skew-symmetric, i.e. when the infinite
homography is compatible with the epipolar geometry. Parameters are the two
focal lengths and an axis-angle rotation; principal points stay pinned at the
image centers and the translation direction only enters through F, which is
held fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometry, InsufficientMatches, InvalidSize
from .geometry import (
    CameraIntrinsics,
    Correspondences,
    Mat3,
    RigidMotion,
    Vec3,
    axis_angle_from_rotation,
    epipoles_from_F,
    rotation_from_axis_angle,
)


@dataclass
class StereoCalibration:
    """Everything the warping stage needs about the two views."""

    K: CameraIntrinsics
    Kp: CameraIntrinsics
    motion: RigidMotion
    F: Mat3
    e: Vec3       # epipole in the target image, unit norm
    ep: Vec3      # epipole in the reference image, unit norm
    H_inf: Mat3

    def to_dict(self) -> dict:
        return {
            "K": {"f": self.K.f, "cx": self.K.cx, "cy": self.K.cy},
            "Kp": {"f": self.Kp.f, "cx": self.Kp.cx, "cy": self.Kp.cy},
            "R": self.motion.R.ravel().tolist(),
            "t": self.motion.t.tolist(),
            "F": self.F.ravel().tolist(),
            "e": self.e.tolist(),
            "ep": self.ep.tolist(),
            "H_inf": self.H_inf.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StereoCalibration":
        return cls(
            K=CameraIntrinsics(**d["K"]),
            Kp=CameraIntrinsics(**d["Kp"]),
            motion=RigidMotion(
                R=np.array(d["R"], dtype=np.float64).reshape(3, 3),
                t=np.array(d["t"], dtype=np.float64),
            ),
            F=np.array(d["F"], dtype=np.float64).reshape(3, 3),
            e=np.array(d["e"], dtype=np.float64),
            ep=np.array(d["ep"], dtype=np.float64),
            H_inf=np.array(d["H_inf"], dtype=np.float64).reshape(3, 3),
        )


@dataclass
class RefineConfig:
    max_iters: int = 100
    rel_tol: float = 1e-10
    damping_init: float = 1e-3
    # evaluate the first error term as x^T (H @ F) x instead of the
    # self-consistent x^T (H^T @ F) x
    eq4_literal: bool = False


@dataclass
class RefineInfo:
    """Diagnostics from one refinement run."""

    objective_initial: float
    objective_final: float
    n_iters: int
    converged: bool
    objectives: list[float] = field(default_factory=list)


def initial_intrinsics(width: int, height: int, focal_hint: float | None = None) -> CameraIntrinsics:
    """Bootstrap intrinsics: principal point at the image center, focal from
    the hint or 1.2x the larger image side."""
    if width < 1 or height < 1:
        raise InvalidSize(f"invalid image size {width}x{height}")
    f = float(focal_hint) if focal_hint is not None else 1.2 * max(width, height)
    return CameraIntrinsics(f=f, cx=width / 2.0, cy=height / 2.0)


def _depth_pair(R: Mat3, t: Vec3, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-ray depths z1, z2 minimizing ||z1 R a - z2 b + t||, vectorized.

    a, b are (N,3) normalized-coordinate rays in the two cameras. Returns
    (z1, z2, valid); rays nearly parallel to each other are marked invalid.
    """
    u = a @ R.T
    uu = np.einsum("ij,ij->i", u, u)
    vv = np.einsum("ij,ij->i", b, b)
    uv = np.einsum("ij,ij->i", u, b)
    ut = u @ t
    vt = b @ t
    det = uu * vv - uv * uv
    valid = det > 1e-12 * uu * vv
    z1 = np.zeros(len(u))
    z2 = np.zeros(len(u))
    d = np.where(valid, det, 1.0)
    z1[:] = (-ut * vv + vt * uv) / d
    z2[:] = (uv * -ut + uu * vt) / d
    return z1, z2, valid


def rotation_from_F(
    F: Mat3, K: CameraIntrinsics, Kp: CameraIntrinsics, inliers: Correspondences
) -> RigidMotion:
    """Factor the essential matrix K'^T F K and pick the (R, t) candidate for
    which the most inliers triangulate in front of both cameras.

    Raises DegenerateGeometry when no candidate wins a strict majority of the
    cheirality vote.
    """
    if len(inliers) < 1:
        raise InsufficientMatches("cheirality vote needs at least one inlier")
    E = Kp.matrix().T @ F @ K.matrix()
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])

    a = inliers.src_h @ K.inv_matrix().T
    b = inliers.dst_h @ Kp.inv_matrix().T

    best: tuple[int, Mat3, Vec3] | None = None
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for t in (U[:, 2], -U[:, 2]):
            z1, z2, valid = _depth_pair(R, t, a, b)
            votes = int(np.count_nonzero(valid & (z1 > 0) & (z2 > 0)))
            if best is None or votes > best[0]:
                best = (votes, R, t)
    votes, R, t = best
    if 2 * votes <= len(inliers):
        raise DegenerateGeometry(
            f"no cheirality majority ({votes}/{len(inliers)} in front)"
        )
    return RigidMotion(R=R, t=t / np.linalg.norm(t))


def infinite_homography(K: CameraIntrinsics, Kp: CameraIntrinsics, motion: RigidMotion) -> Mat3:
    """K' R K^{-1}: the homography induced by the plane at infinity."""
    return Kp.matrix() @ motion.R @ K.inv_matrix()


def compatibility_residual(H_inf: Mat3, F: Mat3) -> tuple[float, float]:
    """How far H_inf is from being compatible with F.

    Returns (skew_res, axis_err): the relative symmetric part of
    A = H_inf^T F, and the angle in radians between the skew axis of A and
    the target-image epipole. Both are invariant to rescaling either input.
    """
    A = H_inf.T @ F
    norm = float(np.linalg.norm(A))
    if norm < 1e-15:
        return math.inf, math.inf
    skew_res = float(np.linalg.norm(A + A.T)) / norm
    S = (A - A.T) / 2.0
    axis = np.array([S[2, 1], S[0, 2], S[1, 0]])
    axis_norm = float(np.linalg.norm(axis))
    if axis_norm < 1e-15:
        return skew_res, math.inf
    # least-squares epipole: smallest right singular vector of F
    e = np.linalg.svd(F)[2][2]
    c = abs(float(axis @ e)) / (axis_norm * float(np.linalg.norm(e)))
    axis_err = math.acos(min(1.0, c))
    return skew_res, axis_err


def _error_terms(
    H: Mat3, F: Mat3, x1: np.ndarray, x2: np.ndarray, inv_sden: np.ndarray, literal: bool
) -> np.ndarray:
    """Stacked per-correspondence residuals of the refinement objective."""
    Hi = np.linalg.inv(H)
    A1 = (H @ F) if literal else (H.T @ F)
    t1 = np.einsum("ni,ij,nj->n", x1, A1, x1)
    t2 = np.einsum("ni,ij,nj->n", x2, F @ Hi, x2)
    return np.concatenate([t1 * inv_sden, t2 * inv_sden])


def refine_calibration(
    init: StereoCalibration, inliers: Correspondences, cfg: RefineConfig | None = None
) -> tuple[StereoCalibration, RefineInfo]:
    """Damped least-squares refinement of (f, f', R) under fixed F.

    The objective is the Sampson-normalized sum of the two compatibility
    quadratic forms over all inliers; accepted steps never increase it.
    Returns the refined calibration and a RefineInfo whose ``converged`` flag
    is False when the iteration cap was hit while still improving.
    """
    cfg = cfg or RefineConfig()
    if len(inliers) < 8:
        raise InsufficientMatches("refinement needs >= 8 inliers")
    F = init.F
    x1 = inliers.src_h
    x2 = inliers.dst_h
    Fx = x1 @ F.T
    Ftx = x2 @ F
    den = Fx[:, 0] ** 2 + Fx[:, 1] ** 2 + Ftx[:, 0] ** 2 + Ftx[:, 1] ** 2
    if np.any(den < 1e-30):
        den = np.maximum(den, 1e-30)
    inv_sden = 1.0 / np.sqrt(den)

    cx1, cy1 = init.K.cx, init.K.cy
    cx2, cy2 = init.Kp.cx, init.Kp.cy

    def residuals(p: np.ndarray) -> np.ndarray:
        Ka = CameraIntrinsics(p[0], cx1, cy1).matrix()
        Kb = CameraIntrinsics(p[1], cx2, cy2).matrix()
        H = Kb @ rotation_from_axis_angle(p[2:]) @ np.linalg.inv(Ka)
        return _error_terms(H, F, x1, x2, inv_sden, cfg.eq4_literal)

    p = np.array([init.K.f, init.Kp.f, *axis_angle_from_rotation(init.motion.R)])
    r = residuals(p)
    obj = float(r @ r)
    info = RefineInfo(objective_initial=obj, objective_final=obj, n_iters=0,
                      converged=True, objectives=[obj])

    lam = cfg.damping_init
    stationary = 1e-14 * r.size   # numerically-zero objective: do not step
    converged = True
    if obj > stationary:
        converged = False
        for _ in range(cfg.max_iters):
            info.n_iters += 1
            r = residuals(p)
            J = np.empty((r.size, p.size))
            for k in range(p.size):
                h = 1e-6 * max(abs(p[k]), 1.0)
                pp = p.copy()
                pp[k] += h
                pm = p.copy()
                pm[k] -= h
                J[:, k] = (residuals(pp) - residuals(pm)) / (2.0 * h)
            JtJ = J.T @ J
            g = J.T @ r
            diag = np.maximum(np.diag(JtJ), 1e-12)
            accepted = False
            for _ in range(30):
                try:
                    dp = np.linalg.solve(JtJ + lam * np.diag(diag), -g)
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
                cand = p + dp
                cand_obj = float(residuals(cand) @ residuals(cand))
                if cand_obj < obj:
                    rel_drop = (obj - cand_obj) / max(obj, 1e-300)
                    p, obj = cand, cand_obj
                    info.objectives.append(obj)
                    lam = max(lam / 10.0, 1e-14)
                    accepted = True
                    if rel_drop < cfg.rel_tol or obj < stationary:
                        converged = True
                    break
                lam *= 10.0
            if not accepted:
                converged = True  # no descent direction: numerical minimum
                break
            if converged:
                break

    K = CameraIntrinsics(float(p[0]), cx1, cy1)
    Kp = CameraIntrinsics(float(p[1]), cx2, cy2)
    R = rotation_from_axis_angle(p[2:])
    motion = RigidMotion(R=R, t=init.motion.t)
    e, ep = epipoles_from_F(F)
    calib = StereoCalibration(
        K=K, Kp=Kp, motion=motion, F=F, e=e, ep=ep,
        H_inf=infinite_homography(K, Kp, motion),
    )
    info.objective_final = obj
    info.converged = converged
    return calib, info
