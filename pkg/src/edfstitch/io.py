"""File formats: PNG images, the matches JSON, calibration and metrics JSON
documents, and synthetic scene specifications.

Match file schema (version 1)::

    {"version": 1, "size1": [w, h], "size2": [w, h],
     "matches": [[u1, v1, u2, v2], ...]}

Image 1 is the reference (first CLI positional), image 2 the target;
coordinates are pixels with the origin at the top-left and may exceed the
declared size by at most one pixel of slack.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from PIL import Image

from .calibration import StereoCalibration
from .errors import BoundsError, InsufficientMatches, ParseError
from .geometry import CameraIntrinsics, Correspondences, PlaneParams, RigidMotion, rotation_from_axis_angle
from .image import ImageBuffer
from .metrics import MetricsReport
from .synth import SceneSpec


def load_image(path: str | Path) -> ImageBuffer:
    try:
        with Image.open(path) as im:
            if im.mode in ("L", "I;16", "I"):
                arr = np.asarray(im.convert("L"), dtype=np.uint8)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ParseError(f"cannot read image {path}: {exc}") from exc
    return ImageBuffer.from_array(arr)


def save_image(path: str | Path, buf: ImageBuffer) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(buf.data).save(path, format="PNG")


def _load_json(path: str | Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc


def _dump_json(path: str | Path, payload: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_matches(path: str | Path) -> tuple[Correspondences, tuple[int, int], tuple[int, int]]:
    """Parse and validate a matches file.

    Returns (correspondences, reference size, target size); ``src`` is the
    target-image column pair (u2, v2) and ``dst`` the reference pair.
    """
    doc = _load_json(path)
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: expected a JSON object")
    try:
        version = doc["version"]
        size1 = tuple(int(v) for v in doc["size1"])
        size2 = tuple(int(v) for v in doc["size2"])
        rows = doc["matches"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: missing or malformed field: {exc}") from exc
    if version != 1:
        raise ParseError(f"{path}: unsupported version {version!r}")
    if len(size1) != 2 or len(size2) != 2 or min(size1) < 1 or min(size2) < 1:
        raise ParseError(f"{path}: invalid image sizes")
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 4 or not np.all(np.isfinite(arr)):
        raise ParseError(f"{path}: matches must be finite [u1, v1, u2, v2] rows")
    if arr.shape[0] < 8:
        raise InsufficientMatches(f"{path}: {arr.shape[0]} matches, need >= 8")
    for cols, (w, h), tag in ((arr[:, 0:2], size1, "image 1"), (arr[:, 2:4], size2, "image 2")):
        if (np.any(cols[:, 0] < -1.0) or np.any(cols[:, 0] > w + 1.0)
                or np.any(cols[:, 1] < -1.0) or np.any(cols[:, 1] > h + 1.0)):
            raise BoundsError(f"{path}: coordinates outside {tag} dimensions {w}x{h}")
    corrs = Correspondences(src=arr[:, 2:4], dst=arr[:, 0:2])
    return corrs, size1, size2


def save_matches(path: str | Path, corrs: Correspondences,
                 ref_size: tuple[int, int], tgt_size: tuple[int, int]) -> None:
    rows = np.hstack([corrs.dst, corrs.src]).tolist()
    _dump_json(path, {
        "version": 1,
        "size1": [int(ref_size[0]), int(ref_size[1])],
        "size2": [int(tgt_size[0]), int(tgt_size[1])],
        "matches": rows,
    })


def load_calibration(path: str | Path) -> StereoCalibration:
    doc = _load_json(path)
    try:
        return StereoCalibration.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: malformed calibration: {exc}") from exc


def save_calibration(path: str | Path, calib: StereoCalibration) -> None:
    _dump_json(path, calib.to_dict())


def save_metrics(path: str | Path, report: MetricsReport) -> None:
    _dump_json(path, report.to_dict())


def load_scene_spec(path: str | Path) -> SceneSpec:
    """Scene description JSON -> SceneSpec.

    Required keys: size [w, h], focal, rotation_deg (axis-angle vector whose
    norm is the angle in degrees), translation [3], planes (list of {n, d}).
    Optional: focal_ref, points_per_plane, free_points, free_depth_range,
    noise_sigma, outlier_fraction, seed.
    """
    doc = _load_json(path)
    try:
        w, h = (int(v) for v in doc["size"])
        focal = float(doc["focal"])
        focal_ref = float(doc.get("focal_ref", focal))
        rot_deg = np.asarray(doc["rotation_deg"], dtype=np.float64)
        translation = np.asarray(doc["translation"], dtype=np.float64)
        planes = [PlaneParams(n=np.asarray(p["n"], dtype=np.float64), d=float(p["d"]))
                  for p in doc["planes"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: missing or malformed field: {exc}") from exc
    R = rotation_from_axis_angle(rot_deg * math.pi / 180.0)
    spec = SceneSpec(
        width=w,
        height=h,
        K=CameraIntrinsics(f=focal, cx=w / 2.0, cy=h / 2.0),
        Kp=CameraIntrinsics(f=focal_ref, cx=w / 2.0, cy=h / 2.0),
        motion=RigidMotion(R=R, t=translation),
        planes=planes,
        points_per_plane=int(doc.get("points_per_plane", 60)),
        free_points=int(doc.get("free_points", 0)),
        noise_sigma=float(doc.get("noise_sigma", 0.0)),
        outlier_fraction=float(doc.get("outlier_fraction", 0.0)),
        seed=int(doc.get("seed", 0)),
    )
    if "free_depth_range" in doc:
        spec.free_depth_range = tuple(float(v) for v in doc["free_depth_range"])
    return spec


def save_model_debug(path: str | Path, model) -> None:
    """Dump a fitted displacement model for inspection."""
    _dump_json(path, model.to_dict())
