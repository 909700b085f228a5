"""Shared synthetic rigs and scenes for the test suite.

Scene fixtures are session-scoped; rendering a textured pair costs about a
second, and most modules only need the geometry.
"""

import numpy as np
import pytest

from edfstitch import CameraIntrinsics, PlaneParams, RigidMotion, SceneSpec, make_scene_pair
from edfstitch.geometry import rotation_from_axis_angle
from edfstitch.synth import scene_correspondences

# rotation axis with all components nonzero: keeps the rig away from the
# coplanar-axes configuration where focal self-calibration is ambiguous
GENERIC_AXIS = np.array([0.25, 1.0, 0.15]) / np.linalg.norm([0.25, 1.0, 0.15])


def generic_motion(angle_deg: float = 6.0, baseline: float = 0.10,
                   t_dir=(1.0, 0.2, 0.16)) -> RigidMotion:
    return RigidMotion(
        R=rotation_from_axis_angle(GENERIC_AXIS * np.deg2rad(angle_deg)),
        t=baseline * np.asarray(t_dir, dtype=np.float64),
    )


def two_plane_spec(seed=5, width=640, height=480, focal=760.0, baseline=0.10,
                   points_per_plane=80, free_points=40, noise=0.0, outliers=0.0):
    return SceneSpec(
        width=width, height=height,
        K=CameraIntrinsics(focal, width / 2.0, height / 2.0),
        Kp=CameraIntrinsics(focal, width / 2.0, height / 2.0),
        motion=generic_motion(baseline=baseline),
        planes=[PlaneParams(n=np.array([0.0, 0.0, 1.0]), d=-6.0),
                PlaneParams(n=np.array([0.25, -0.15, 1.0]), d=-3.4)],
        points_per_plane=points_per_plane,
        free_points=free_points,
        noise_sigma=noise,
        outlier_fraction=outliers,
        seed=seed,
    )


def free_point_spec(seed=1, n=200, angle_deg=6.0, baseline=0.10, focal=760.0,
                    noise=0.0, outliers=0.0, width=640, height=480):
    return SceneSpec(
        width=width, height=height,
        K=CameraIntrinsics(focal, width / 2.0, height / 2.0),
        Kp=CameraIntrinsics(focal, width / 2.0, height / 2.0),
        motion=generic_motion(angle_deg=angle_deg, baseline=baseline),
        planes=[],
        free_points=n,
        free_depth_range=(4.0, 12.0),
        noise_sigma=noise,
        outlier_fraction=outliers,
        seed=seed,
    )


@pytest.fixture(scope="session")
def oracle_points():
    """200 noiseless free-space correspondences plus exact ground truth."""
    corrs, labels, gt = scene_correspondences(free_point_spec(seed=1))
    spec = free_point_spec(seed=1)
    return {"corrs": corrs, "labels": labels, "gt": gt,
            "K": spec.K, "Kp": spec.Kp, "motion": spec.motion}


@pytest.fixture(scope="session")
def two_plane_scene():
    return make_scene_pair(two_plane_spec(seed=5))


@pytest.fixture(scope="session")
def single_plane_scene():
    spec = two_plane_spec(seed=3, baseline=0.12)
    spec.planes = [PlaneParams(n=np.array([0.0, 0.0, 1.0]), d=-6.0)]
    spec.free_points = 0
    return make_scene_pair(spec)


@pytest.fixture(scope="session")
def rotation_scene():
    spec = two_plane_spec(seed=7)
    spec.motion = RigidMotion(R=rotation_from_axis_angle(GENERIC_AXIS * np.deg2rad(7.0)),
                              t=np.zeros(3))
    return make_scene_pair(spec)
