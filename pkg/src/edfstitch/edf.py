"""Epipolar displacement field: thin-plate-spline residual interpolation in
the warped image plane, plus the tapered anchor grid used by the warper.

The field's radial part uses the TPS kernel phi(r) = r^2 ln r over control
centers placed at the warped inlier positions; the affine part is the single
shared 3-vector scaled by the inhomogeneous epipole coordinates, which keeps
the affine displacement component parallel to the epipole direction. Sharing
the affine vector across both axes leaves three fewer unknowns than the two
independent per-axis fits, so the coupled problem is solved as one square
system whose stationarity conditions combine the per-axis moment constraints
with epipole weights; at zero regularization the field then interpolates
every control residual exactly, and the per-axis moment sums vanish whenever
the residuals are themselves realizable by the field family.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import EpipoleAtInfinity, ExcessiveGrid, SingularSystem
from .geometry import Correspondences, Mat3, Vec3

MAX_GRID_ANCHORS = 4_000_000


@dataclass
class EDFConfig:
    rho: float = 8.0 * math.pi
    lambda_scale: float = 1.0     # effective regularizer is rho * lambda_scale
    cell_px: int = 10
    taper_factor: float = 5.0     # transition width = factor * max |residual|


@dataclass
class ResidualField:
    """Warped-plane control points and their displacement targets."""

    centers: np.ndarray       # (N, 2) warped positions of the inlier sources
    values: np.ndarray        # (N, 2) dst - warped(src), px
    n_at_infinity: int = 0    # inliers dropped for a near-zero third coordinate


def compute_residuals(H: Mat3, inliers: Correspondences) -> ResidualField:
    """Map inlier sources through H and difference against their matches.

    Points whose mapped homogeneous third coordinate is within 1e-9 of zero
    cannot be expressed inhomogeneously; they are excluded and counted.
    """
    q = inliers.src_h @ H.T
    ok = np.abs(q[:, 2]) > 1e-9
    warped = q[ok, :2] / q[ok, 2:3]
    return ResidualField(
        centers=warped,
        values=inliers.dst[ok] - warped,
        n_at_infinity=int(np.count_nonzero(~ok)),
    )


def _phi_from_sq(d2: np.ndarray) -> np.ndarray:
    """TPS kernel from squared distances: r^2 ln r = d2 * ln(d2) / 2."""
    out = np.zeros_like(d2)
    nz = d2 > 1e-300
    out[nz] = 0.5 * d2[nz] * np.log(d2[nz])
    return out


def _pairwise_phi(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    du = a[:, None, 0] - b[None, :, 0]
    dv = a[:, None, 1] - b[None, :, 1]
    return _phi_from_sq(du * du + dv * dv)


def _rbf_apply(pts: np.ndarray, centers: np.ndarray, coeffs: np.ndarray,
               chunk: int = 4096) -> np.ndarray:
    """Sum_i coeffs[:, i] * phi(|p - c_i|) evaluated in memory-bounded chunks.

    coeffs is (N, k); returns (P, k).
    """
    out = np.empty((pts.shape[0], coeffs.shape[1]))
    for lo in range(0, pts.shape[0], chunk):
        hi = min(lo + chunk, pts.shape[0])
        out[lo:hi] = _pairwise_phi(pts[lo:hi], centers) @ coeffs
    return out


@dataclass
class EDFModel:
    """Fitted displacement field (epipole-coupled affine part)."""

    centers: np.ndarray    # (N, 2)
    w: np.ndarray          # (N,) radial coefficients, u axis
    wprime: np.ndarray     # (N,) radial coefficients, v axis
    m: Vec3                # shared affine coefficients
    eprime: np.ndarray     # (2,) inhomogeneous epipole in the warped plane
    rho: float

    def displacement(self, pts: np.ndarray) -> np.ndarray:
        """(P, 2) displacement at warped-plane positions (P, 2)."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        radial = _rbf_apply(pts, self.centers, np.column_stack([self.w, self.wprime]))
        aff = pts @ self.m[:2] + self.m[2]
        radial[:, 0] += self.eprime[0] * aff
        radial[:, 1] += self.eprime[1] * aff
        return radial

    def to_dict(self) -> dict:
        return {
            "centers": self.centers.tolist(),
            "w": self.w.tolist(),
            "wprime": self.wprime.tolist(),
            "m": self.m.tolist(),
            "eprime": self.eprime.tolist(),
            "rho": self.rho,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EDFModel":
        return cls(
            centers=np.array(d["centers"], dtype=np.float64).reshape(-1, 2),
            w=np.array(d["w"], dtype=np.float64),
            wprime=np.array(d["wprime"], dtype=np.float64),
            m=np.array(d["m"], dtype=np.float64),
            eprime=np.array(d["eprime"], dtype=np.float64),
            rho=float(d["rho"]),
        )


@dataclass
class TPSModel:
    """Plain thin-plate field with independent per-axis affine parts; used by
    the homography fallback path."""

    centers: np.ndarray
    w: np.ndarray
    wprime: np.ndarray
    a: Vec3         # u-axis affine coefficients
    aprime: Vec3    # v-axis affine coefficients
    rho: float

    def displacement(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        radial = _rbf_apply(pts, self.centers, np.column_stack([self.w, self.wprime]))
        radial[:, 0] += pts @ self.a[:2] + self.a[2]
        radial[:, 1] += pts @ self.aprime[:2] + self.aprime[2]
        return radial

    def to_dict(self) -> dict:
        return {
            "centers": self.centers.tolist(),
            "w": self.w.tolist(),
            "wprime": self.wprime.tolist(),
            "a": self.a.tolist(),
            "aprime": self.aprime.tolist(),
            "rho": self.rho,
        }


def _dedupe(centers: np.ndarray, values: np.ndarray, tol: float = 1e-6):
    """Merge control points closer than tol px, averaging their residuals.

    Output keeps the first-occurrence order of the inputs.
    """
    order = np.lexsort((centers[:, 1], centers[:, 0]))
    c = centers[order]
    n = len(c)
    # runs of nearly-equal u; within multi-member runs, split again by v
    new_run = np.ones(n, dtype=bool)
    new_run[1:] = np.diff(c[:, 0]) >= tol
    gid_sorted = np.full(n, -1, dtype=np.int64)
    next_id = 0
    run_starts = np.flatnonzero(new_run)
    run_ends = np.append(run_starts[1:], n)
    for s, e in zip(run_starts, run_ends):
        if e - s == 1:
            gid_sorted[s] = next_id
            next_id += 1
            continue
        sub = np.argsort(c[s:e, 1], kind="stable") + s
        vs = c[sub, 1]
        split = np.ones(e - s, dtype=bool)
        split[1:] = np.diff(vs) >= tol
        gid_sorted[sub] = next_id + np.cumsum(split) - 1
        next_id += int(split.sum())
    gid = np.empty(n, dtype=np.int64)
    gid[order] = gid_sorted
    # relabel groups by first occurrence so input order survives the merge
    first = np.full(next_id, n, dtype=np.int64)
    np.minimum.at(first, gid, np.arange(n))
    rank = np.empty(next_id, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(next_id)
    gid = rank[gid]
    cnt = np.bincount(gid).astype(np.float64)
    cc = np.column_stack([np.bincount(gid, centers[:, 0]) / cnt,
                          np.bincount(gid, centers[:, 1]) / cnt])
    vv = np.column_stack([np.bincount(gid, values[:, 0]) / cnt,
                          np.bincount(gid, values[:, 1]) / cnt])
    return cc, vv


def _solve_refined(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """LU solve with iterative refinement; guarantees a tiny relative
    residual or raises SingularSystem."""
    try:
        lu, piv = scipy.linalg.lu_factor(A)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise SingularSystem(f"system factorization failed: {exc}") from exc
    z = scipy.linalg.lu_solve((lu, piv), b)
    for _ in range(2):
        r = b - A @ z
        if not np.all(np.isfinite(r)):
            raise SingularSystem("solution diverged; system is singular")
        z = z + scipy.linalg.lu_solve((lu, piv), r)
    resid = np.abs(A @ z - b).max()
    scale = max(float(np.abs(b).max()), 1e-300)
    if resid > 1e-8 * scale:
        raise SingularSystem(f"solve residual {resid:.2e} exceeds 1e-8 of the data")
    return z


def _check_spread(centers: np.ndarray):
    if centers.shape[0] < 3:
        raise SingularSystem(f"need >= 3 distinct control points, got {centers.shape[0]}")
    c = centers - centers.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    if s[1] <= 1e-9 * max(s[0], 1.0):
        raise SingularSystem("control points are collinear")


def fit_edf(residuals: ResidualField, eprime: Vec3, cfg: EDFConfig | None = None) -> EDFModel:
    """Solve the coupled thin-plate system for both displacement axes.

    ``eprime`` is the homogeneous epipole of the reference view; it must be
    finite (third coordinate not ~0), otherwise EpipoleAtInfinity is raised
    and the caller should use the homography fallback.
    """
    cfg = cfg or EDFConfig()
    eprime = np.asarray(eprime, dtype=np.float64)
    if eprime.shape == (2,):
        e12 = eprime
    else:
        if abs(eprime[2]) < 1e-9 * np.linalg.norm(eprime):
            raise EpipoleAtInfinity("epipole has no finite inhomogeneous form")
        e12 = eprime[:2] / eprime[2]

    centers, values = _dedupe(np.asarray(residuals.centers, dtype=np.float64),
                              np.asarray(residuals.values, dtype=np.float64))
    _check_spread(centers)
    n = centers.shape[0]
    rho = float(cfg.rho) * float(cfg.lambda_scale)

    shift = centers.mean(axis=0)
    cs = centers - shift
    Kmat = _pairwise_phi(cs, cs) + rho * np.eye(n)
    M = np.column_stack([cs, np.ones(n)])

    A = np.zeros((2 * n + 3, 2 * n + 3))
    A[:n, :n] = Kmat
    A[n:2 * n, n:2 * n] = Kmat
    A[:n, 2 * n:] = e12[0] * M
    A[n:2 * n, 2 * n:] = e12[1] * M
    A[2 * n:, :n] = e12[0] * M.T
    A[2 * n:, n:2 * n] = e12[1] * M.T
    b = np.concatenate([values[:, 0], values[:, 1], np.zeros(3)])

    z = _solve_refined(A, b)

    w = z[:n]
    wprime = z[n:2 * n]
    m_shift = z[2 * n:]
    m = np.array([
        m_shift[0],
        m_shift[1],
        m_shift[2] - m_shift[0] * shift[0] - m_shift[1] * shift[1],
    ])
    return EDFModel(centers=centers, w=w, wprime=wprime, m=m, eprime=e12, rho=rho)


def fit_tps(residuals: ResidualField, cfg: EDFConfig | None = None) -> TPSModel:
    """Per-axis thin-plate fit with free affine parts (fallback field)."""
    cfg = cfg or EDFConfig()
    centers, values = _dedupe(np.asarray(residuals.centers, dtype=np.float64),
                              np.asarray(residuals.values, dtype=np.float64))
    _check_spread(centers)
    n = centers.shape[0]
    rho = float(cfg.rho) * float(cfg.lambda_scale)

    shift = centers.mean(axis=0)
    cs = centers - shift
    A = np.zeros((n + 3, n + 3))
    A[:n, :n] = _pairwise_phi(cs, cs) + rho * np.eye(n)
    M = np.column_stack([cs, np.ones(n)])
    A[:n, n:] = M
    A[n:, :n] = M.T
    zu = _solve_refined(A, np.concatenate([values[:, 0], np.zeros(3)]))
    zv = _solve_refined(A, np.concatenate([values[:, 1], np.zeros(3)]))

    def unshift(a):
        return np.array([a[0], a[1], a[2] - a[0] * shift[0] - a[1] * shift[1]])

    return TPSModel(centers=centers, w=zu[:n], wprime=zv[:n],
                    a=unshift(zu[n:]), aprime=unshift(zv[n:]), rho=rho)


@dataclass
class DisplacementGrid:
    """Uniform anchor lattice in the warped plane with tapered displacements.

    ``du``/``dv`` already include the taper weight; ``displacement_at``
    bilinearly interpolates between anchors and returns zero outside the
    lattice (where the field has been tapered away anyway).
    """

    origin: np.ndarray     # (2,) warped-plane position of anchor [0, 0]
    spacing: float
    du: np.ndarray         # (nv, nu)
    dv: np.ndarray         # (nv, nu)
    taper: np.ndarray      # (nv, nu) in [0, 1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.du.shape

    def anchor_positions(self) -> np.ndarray:
        nv, nu = self.du.shape
        xs = self.origin[0] + np.arange(nu) * self.spacing
        ys = self.origin[1] + np.arange(nv) * self.spacing
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)

    def displacement_at(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        nv, nu = self.du.shape
        sx = (pts[:, 0] - self.origin[0]) / self.spacing
        sy = (pts[:, 1] - self.origin[1]) / self.spacing
        inside = (sx >= 0) & (sy >= 0) & (sx <= nu - 1) & (sy <= nv - 1)
        out = np.zeros_like(pts)
        if not np.any(inside):
            return out
        sx = np.clip(sx[inside], 0, nu - 1 - 1e-12)
        sy = np.clip(sy[inside], 0, nv - 1 - 1e-12)
        ix = np.minimum(sx.astype(np.int64), nu - 2) if nu > 1 else np.zeros(sx.shape, np.int64)
        iy = np.minimum(sy.astype(np.int64), nv - 2) if nv > 1 else np.zeros(sy.shape, np.int64)
        fx = sx - ix
        fy = sy - iy
        for k, comp in enumerate((self.du, self.dv)):
            v = (comp[iy, ix] * (1 - fx) * (1 - fy)
                 + comp[iy, ix + 1] * fx * (1 - fy)
                 + comp[iy + 1, ix] * (1 - fx) * fy
                 + comp[iy + 1, ix + 1] * fx * fy)
            out[inside, k] = v
        return out


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def build_displacement_grid(
    model,
    warped_bbox: tuple[float, float, float, float],
    ref_rect: tuple[float, float, float, float],
    cfg: EDFConfig | None = None,
) -> DisplacementGrid:
    """Evaluate the field on a uniform lattice and taper it to zero away from
    the overlap region.

    Anchors inside ``ref_rect`` keep the full field; outside, the weight
    falls smoothly to zero over a band of width taper_factor * max residual
    magnitude, which suppresses extrapolated deformation in non-overlap
    areas.
    """
    cfg = cfg or EDFConfig()
    x0, y0, x1, y1 = map(float, warped_bbox)
    if not (x1 > x0 and y1 > y0):
        raise ValueError("warped_bbox is empty")
    spacing = float(max(1, cfg.cell_px))
    nu = int(math.ceil((x1 - x0) / spacing)) + 1
    nv = int(math.ceil((y1 - y0) / spacing)) + 1
    if nu * nv > MAX_GRID_ANCHORS:
        raise ExcessiveGrid(f"{nu}x{nv} anchors exceed the {MAX_GRID_ANCHORS} cap")

    xs = x0 + np.arange(nu) * spacing
    ys = y0 + np.arange(nv) * spacing
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    disp = model.displacement(pts)

    control_mag = np.linalg.norm(model.displacement(model.centers), axis=1)
    T = cfg.taper_factor * float(control_mag.max(initial=0.0))

    rx0, ry0, rx1, ry1 = map(float, ref_rect)
    ddx = np.maximum(np.maximum(rx0 - pts[:, 0], pts[:, 0] - rx1), 0.0)
    ddy = np.maximum(np.maximum(ry0 - pts[:, 1], pts[:, 1] - ry1), 0.0)
    dist = np.hypot(ddx, ddy)
    if T > 0:
        weight = 1.0 - _smoothstep(dist / T)
    else:
        weight = (dist <= 0.0).astype(np.float64)

    du = (disp[:, 0] * weight).reshape(nv, nu)
    dv = (disp[:, 1] * weight).reshape(nv, nu)
    return DisplacementGrid(
        origin=np.array([x0, y0]),
        spacing=spacing,
        du=du,
        dv=dv,
        taper=weight.reshape(nv, nu),
    )
