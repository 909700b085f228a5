"""Displacement-field fitting: interpolation behavior, system residuals,
taper, and the anchor grid."""

import math

import numpy as np
import pytest

from edfstitch import (
    EDFConfig,
    EDFModel,
    ResidualField,
    build_displacement_grid,
    compute_residuals,
    epipolar_line,
    fit_edf,
    fit_tps,
)
from edfstitch.errors import EpipoleAtInfinity, ExcessiveGrid, SingularSystem
from edfstitch.geometry import Correspondences, point_line_distance
from edfstitch.synth import scene_correspondences

from conftest import two_plane_spec

RHO_ZERO = EDFConfig(rho=0.0)


@pytest.fixture(scope="module")
def rig_residuals():
    """Residual field of a two-plane rig relative to its true infinite
    homography, plus the geometry needed for epipolar checks."""
    spec = two_plane_spec(seed=21, points_per_plane=40, free_points=20)
    corrs, _, gt = scene_correspondences(spec)
    res = compute_residuals(gt.H_inf, corrs)
    return {"res": res, "gt": gt, "corrs": corrs}


def _phi(r):
    out = np.zeros_like(r)
    nz = r > 0
    out[nz] = r[nz] ** 2 * np.log(r[nz])
    return out


def _dense_oracle(centers, values, e12, rho):
    """Independent assembly and solve of the coupled system (no shifting,
    plain lstsq) used to cross-check the production solver."""
    n = len(centers)
    d = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=2)
    Km = _phi(d) + rho * np.eye(n)
    M = np.column_stack([centers, np.ones(n)])
    A = np.zeros((2 * n + 3, 2 * n + 3))
    A[:n, :n] = Km
    A[n:2 * n, n:2 * n] = Km
    A[:n, 2 * n:] = e12[0] * M
    A[n:2 * n, 2 * n:] = e12[1] * M
    A[2 * n:, :n] = e12[0] * M.T
    A[2 * n:, n:2 * n] = e12[1] * M.T
    b = np.concatenate([values[:, 0], values[:, 1], np.zeros(3)])
    z = np.linalg.lstsq(A, b, rcond=None)[0]
    return z[:n], z[n:2 * n], z[2 * n:]


def _consistent_instance(seed=0, n=16, eprime=(300.0, -40.0)):
    """Residuals generated from a known model with exact side conditions."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform([0, 0], [500, 400], size=(n, 2))
    M = np.column_stack([centers, np.ones(n)])
    proj = np.eye(n) - M @ np.linalg.pinv(M)
    w0 = proj @ rng.normal(0, 0.02, n)
    wp0 = proj @ rng.normal(0, 0.02, n)
    m0 = rng.normal(0, 1e-4, 3)
    model0 = EDFModel(centers=centers, w=w0, wprime=wp0, m=m0,
                      eprime=np.asarray(eprime, dtype=np.float64), rho=0.0)
    values = model0.displacement(centers)
    return model0, ResidualField(centers=centers, values=values)


class TestComputeResiduals:
    def test_exact_homography_transfer_is_zero(self, rig_residuals):
        gt = rig_residuals["gt"]
        corrs = rig_residuals["corrs"]
        q = corrs.src_h @ gt.H_inf.T
        exact = Correspondences(src=corrs.src, dst=q[:, :2] / q[:, 2:3])
        res = compute_residuals(gt.H_inf, exact)
        assert float(np.abs(res.values).max()) <= 1e-9

    def test_residuals_slide_along_epipolar_lines(self, rig_residuals):
        """x_inf, the match, and the epipole are collinear."""
        gt = rig_residuals["gt"]
        res = rig_residuals["res"]
        ep = gt.ep / gt.ep[2]
        for i in range(0, len(res.centers), 7):
            a = res.centers[i]
            b = res.centers[i] + res.values[i]
            area = 0.5 * abs((b[0] - a[0]) * (ep[1] - a[1]) - (b[1] - a[1]) * (ep[0] - a[0]))
            # degenerate triangle: all three on the epipolar line
            scale = max(1.0, np.linalg.norm(b - a) * np.linalg.norm(ep[:2] - a))
            assert area / scale <= 1e-6

    def test_warped_point_on_epipolar_line(self, rig_residuals):
        gt = rig_residuals["gt"]
        corrs = rig_residuals["corrs"]
        res = rig_residuals["res"]
        for i in range(0, len(res.centers), 11):
            line = epipolar_line(gt.F, corrs.src_h[i], side="in_reference")
            assert abs(float(point_line_distance(line, res.centers[i][None, :])[0])) <= 1e-9

    def test_point_at_infinity_excluded(self):
        H = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-0.2, 0.0, 1.0]])
        corrs = Correspondences(src=np.array([[5.0, 1.0], [1.0, 1.0]]),
                                dst=np.array([[5.0, 1.0], [1.0, 1.0]]))
        res = compute_residuals(H, corrs)
        assert res.n_at_infinity == 1
        assert len(res.centers) == 1


class TestFitEDF:
    def test_zero_residuals_zero_model(self, rig_residuals):
        res = rig_residuals["res"]
        zero = ResidualField(centers=res.centers, values=np.zeros_like(res.values))
        model = fit_edf(zero, rig_residuals["gt"].ep, RHO_ZERO)
        assert float(np.abs(model.w).max()) <= 1e-12
        assert float(np.abs(model.wprime).max()) <= 1e-12
        assert float(np.abs(model.m).max()) <= 1e-12

    def test_interpolates_at_zero_regularization(self, rig_residuals):
        res = rig_residuals["res"]
        model = fit_edf(res, rig_residuals["gt"].ep, RHO_ZERO)
        got = model.displacement(res.centers)
        err = np.linalg.norm(got - res.values, axis=1)
        assert float(err.max()) <= 1e-8

    def test_matches_independent_dense_solve(self):
        rng = np.random.default_rng(5)
        centers = rng.uniform([0, 0], [600, 450], size=(10, 2))
        values = rng.normal(0, 3.0, size=(10, 2))
        e12 = np.array([900.0, 150.0])
        res = ResidualField(centers=centers, values=values)
        model = fit_edf(res, np.array([e12[0], e12[1], 1.0]), RHO_ZERO)
        w, wp, m_shift = _dense_oracle(centers, values, e12, 0.0)
        # the oracle solves in the unshifted frame; compare field values
        phi_c = _phi(np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=2))
        M = np.column_stack([centers, np.ones(10)])
        oracle_u = phi_c @ w + e12[0] * (M @ m_shift)
        oracle_v = phi_c @ wp + e12[1] * (M @ m_shift)
        got = model.displacement(centers)
        assert np.allclose(got[:, 0], oracle_u, atol=1e-8)
        assert np.allclose(got[:, 1], oracle_v, atol=1e-8)
        # interpolation property holds for both routes
        assert np.allclose(got, values, atol=1e-8)

    def test_assembled_system_residual(self, rig_residuals):
        res = rig_residuals["res"]
        cfg = EDFConfig()
        model = fit_edf(res, rig_residuals["gt"].ep, cfg)
        # reassemble in the solver's shifted frame
        shift = model.centers.mean(axis=0)
        cs = model.centers - shift
        n = len(cs)
        d = np.linalg.norm(cs[:, None, :] - cs[None, :, :], axis=2)
        Km = _phi(d) + model.rho * np.eye(n)
        M = np.column_stack([cs, np.ones(n)])
        e12 = model.eprime
        A = np.zeros((2 * n + 3, 2 * n + 3))
        A[:n, :n] = Km
        A[n:2 * n, n:2 * n] = Km
        A[:n, 2 * n:] = e12[0] * M
        A[n:2 * n, 2 * n:] = e12[1] * M
        A[2 * n:, :n] = e12[0] * M.T
        A[2 * n:, n:2 * n] = e12[1] * M.T
        m_shift = np.array([model.m[0], model.m[1],
                            model.m[2] + model.m[0] * shift[0] + model.m[1] * shift[1]])
        z = np.concatenate([model.w, model.wprime, m_shift])
        b = np.concatenate([res.values[:, 0], res.values[:, 1], np.zeros(3)])
        resid = float(np.abs(A @ z - b).max())
        assert resid <= 1e-8 * float(np.abs(b).max())

    def test_side_conditions_on_consistent_instance(self):
        model0, res = _consistent_instance(seed=7)
        model = fit_edf(res, np.array([*model0.eprime, 1.0]), RHO_ZERO)
        M = np.column_stack([model.centers, np.ones(len(model.centers))])
        bound = 1e-8 * float(np.abs(res.values).max())
        assert float(np.abs(M.T @ model.w).max()) <= bound
        assert float(np.abs(M.T @ model.wprime).max()) <= bound

    def test_misfit_monotone_in_regularizer(self, rig_residuals):
        res = rig_residuals["res"]
        ep = rig_residuals["gt"].ep
        misfits = []
        for rho in (0.0, 8.0 * math.pi, 80.0 * math.pi):
            model = fit_edf(res, ep, EDFConfig(rho=rho))
            err = np.linalg.norm(model.displacement(res.centers) - res.values, axis=1)
            misfits.append(float(err.mean()))
        assert misfits[0] <= 1e-8
        assert misfits[0] < misfits[1] < misfits[2]
        assert all(np.isfinite(misfits))

    def test_epipole_at_infinity_rejected(self, rig_residuals):
        with pytest.raises(EpipoleAtInfinity):
            fit_edf(rig_residuals["res"], np.array([1.0, 0.0, 0.0]))

    def test_collinear_centers_rejected(self):
        centers = np.column_stack([np.linspace(0, 100, 8), np.linspace(0, 50, 8)])
        res = ResidualField(centers=centers, values=np.ones((8, 2)))
        with pytest.raises(SingularSystem):
            fit_edf(res, np.array([100.0, 50.0, 1.0]), RHO_ZERO)

    def test_duplicate_centers_merged(self, rig_residuals):
        res = rig_residuals["res"]
        doubled = ResidualField(
            centers=np.vstack([res.centers, res.centers[:5] + 1e-8]),
            values=np.vstack([res.values, res.values[:5]]),
        )
        model = fit_edf(doubled, rig_residuals["gt"].ep, RHO_ZERO)
        assert len(model.centers) == len(res.centers)

    def test_determinism(self, rig_residuals):
        res = rig_residuals["res"]
        a = fit_edf(res, rig_residuals["gt"].ep, EDFConfig())
        b = fit_edf(res, rig_residuals["gt"].ep, EDFConfig())
        assert np.array_equal(a.w, b.w)
        assert np.array_equal(a.wprime, b.wprime)
        assert np.array_equal(a.m, b.m)

    def test_epipolar_adherence_at_controls(self, rig_residuals):
        """Interpolated controls land back on their epipolar lines."""
        gt = rig_residuals["gt"]
        res = rig_residuals["res"]
        corrs = rig_residuals["corrs"]
        model = fit_edf(res, gt.ep, RHO_ZERO)
        moved = res.centers + model.displacement(res.centers)
        for i in range(0, len(moved), 9):
            line = epipolar_line(gt.F, corrs.src_h[i], side="in_reference")
            assert abs(float(point_line_distance(line, moved[i][None, :])[0])) <= 1e-6

    def test_lambda_scale_multiplies_rho(self, rig_residuals):
        res = rig_residuals["res"]
        ep = rig_residuals["gt"].ep
        a = fit_edf(res, ep, EDFConfig(rho=8 * math.pi, lambda_scale=10.0))
        b = fit_edf(res, ep, EDFConfig(rho=80 * math.pi, lambda_scale=1.0))
        assert np.allclose(a.w, b.w, atol=1e-12)


class TestEvalModel:
    def test_zero_model_everywhere_zero(self):
        model = EDFModel(centers=np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]]),
                         w=np.zeros(3), wprime=np.zeros(3), m=np.zeros(3),
                         eprime=np.array([5.0, 5.0]), rho=0.0)
        pts = np.random.default_rng(0).uniform(-50, 50, (20, 2))
        assert np.array_equal(model.displacement(pts), np.zeros((20, 2)))

    def test_radial_free_model_is_parallel_to_epipole(self):
        model = EDFModel(centers=np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]]),
                         w=np.zeros(3), wprime=np.zeros(3),
                         m=np.array([1e-3, -2e-3, 0.05]),
                         eprime=np.array([400.0, -60.0]), rho=0.0)
        pts = np.random.default_rng(1).uniform(0, 300, (30, 2))
        d = model.displacement(pts)
        cross = d[:, 0] * model.eprime[1] - d[:, 1] * model.eprime[0]
        assert float(np.abs(cross).max()) <= 1e-9 * float(np.abs(d).max()) * np.linalg.norm(model.eprime)

    def test_json_roundtrip_preserves_field(self, rig_residuals):
        res = rig_residuals["res"]
        model = fit_edf(res, rig_residuals["gt"].ep, EDFConfig())
        back = EDFModel.from_dict(model.to_dict())
        pts = np.random.default_rng(2).uniform(0, 600, (50, 2))
        assert np.allclose(back.displacement(pts), model.displacement(pts), atol=1e-12)


class TestDisplacementGrid:
    def _grid(self, rig_residuals, cfg=None):
        cfg = cfg or EDFConfig()
        model = fit_edf(rig_residuals["res"], rig_residuals["gt"].ep, cfg)
        grid = build_displacement_grid(model, (-60.0, -60.0, 700.0, 540.0),
                                       (0.0, 0.0, 640.0, 480.0), cfg)
        return model, grid

    def test_far_anchor_is_zero(self, rig_residuals):
        cfg = EDFConfig()
        model = fit_edf(rig_residuals["res"], rig_residuals["gt"].ep, cfg)
        mags = np.linalg.norm(model.displacement(model.centers), axis=1)
        T = 5.0 * float(mags.max())
        # grid extends beyond the taper band on every side
        pad = T + 50.0
        grid = build_displacement_grid(model, (-pad, -pad, 640.0 + pad, 480.0 + pad),
                                       (0.0, 0.0, 640.0, 480.0), cfg)
        anchors = grid.anchor_positions()
        dx = np.maximum(np.maximum(-anchors[..., 0], anchors[..., 0] - 640.0), 0.0)
        dy = np.maximum(np.maximum(-anchors[..., 1], anchors[..., 1] - 480.0), 0.0)
        far = np.hypot(dx, dy) >= T
        assert np.any(far)
        assert np.all(grid.du[far] == 0.0)
        assert np.all(grid.dv[far] == 0.0)

    def test_inside_anchor_matches_model(self, rig_residuals):
        model, grid = self._grid(rig_residuals)
        anchors = grid.anchor_positions()
        inside = ((anchors[..., 0] >= 0) & (anchors[..., 0] <= 640)
                  & (anchors[..., 1] >= 0) & (anchors[..., 1] <= 480))
        flat = model.displacement(anchors.reshape(-1, 2)).reshape(*anchors.shape[:2], 2)
        assert np.array_equal(grid.du[inside], flat[inside][:, 0])
        assert np.array_equal(grid.dv[inside], flat[inside][:, 1])
        assert np.all(grid.taper[inside] == 1.0)

    def test_bilinear_close_to_pointwise(self):
        """10 px grid resolves a smooth synthetic field to sub-0.1 px."""
        rng = np.random.default_rng(3)
        # jittered lattice keeps centers apart, which keeps curvature mild
        gx, gy = np.meshgrid(np.linspace(60, 440, 5), np.linspace(60, 340, 4))
        centers = np.column_stack([gx.ravel(), gy.ravel()]) + rng.uniform(-20, 20, (20, 2))
        values = rng.normal(0.0, 1.5, size=(20, 2))
        res = ResidualField(centers=centers, values=values)
        model = fit_edf(res, np.array([650.0, 180.0, 1.0]), RHO_ZERO)
        grid = build_displacement_grid(model, (-60.0, -60.0, 560.0, 460.0),
                                       (0.0, 0.0, 500.0, 400.0), EDFConfig(rho=0.0))
        pts = rng.uniform([20, 20], [480, 380], size=(1000, 2))
        direct = model.displacement(pts)
        interp = grid.displacement_at(pts)
        err = np.linalg.norm(direct - interp, axis=1)
        assert float(err.max()) < 0.1

    def test_taper_weight_is_continuous(self, rig_residuals):
        model, grid = self._grid(rig_residuals)
        mags = np.linalg.norm(model.displacement(model.centers), axis=1)
        T = 5.0 * float(mags.max())
        # smoothstep slope peaks at 1.5 / T
        bound = 1.5 * grid.spacing / T + 1e-9
        assert float(np.abs(np.diff(grid.taper, axis=0)).max()) <= bound
        assert float(np.abs(np.diff(grid.taper, axis=1)).max()) <= bound

    def test_anchor_cap(self, rig_residuals):
        model = fit_edf(rig_residuals["res"], rig_residuals["gt"].ep, RHO_ZERO)
        with pytest.raises(ExcessiveGrid):
            build_displacement_grid(model, (0.0, 0.0, 1e5, 1e5), (0.0, 0.0, 640.0, 480.0),
                                    EDFConfig(cell_px=1))


def test_fallback_tps_interpolates(rig_residuals):
    res = rig_residuals["res"]
    model = fit_tps(res, RHO_ZERO)
    got = model.displacement(res.centers)
    assert float(np.linalg.norm(got - res.values, axis=1).max()) <= 1e-8
    # independent per-axis side conditions hold for the free-affine field
    M = np.column_stack([model.centers, np.ones(len(model.centers))])
    bound = 1e-8 * float(np.abs(res.values).max())
    assert float(np.abs(M.T @ model.w).max()) <= bound
    assert float(np.abs(M.T @ model.wprime).max()) <= bound
