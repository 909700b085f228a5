"""Built-in corner matcher so the tool runs without an external feature
pipeline. Best-effort: gradient-autocorrelation corners, normalized patch
descriptors, mutual nearest-neighbor matching with a ratio test."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.ndimage

from .errors import InsufficientMatches, InvalidSize
from .geometry import Correspondences
from .image import ImageBuffer


@dataclass
class MatchConfig:
    max_corners: int = 1200
    nms_radius: int = 4
    patch_radius: int = 8
    ratio: float = 0.8
    response_rel_threshold: float = 5e-3
    harris_k: float = 0.06


def _detect_corners(gray: np.ndarray, cfg: MatchConfig) -> np.ndarray:
    """(N, 2) corner coordinates (x, y), strongest first."""
    g = gray.astype(np.float64)
    gx = scipy.ndimage.sobel(g, axis=1, mode="nearest") / 8.0
    gy = scipy.ndimage.sobel(g, axis=0, mode="nearest") / 8.0
    sxx = scipy.ndimage.gaussian_filter(gx * gx, 1.5, mode="nearest")
    syy = scipy.ndimage.gaussian_filter(gy * gy, 1.5, mode="nearest")
    sxy = scipy.ndimage.gaussian_filter(gx * gy, 1.5, mode="nearest")
    resp = sxx * syy - sxy * sxy - cfg.harris_k * (sxx + syy) ** 2
    peak = float(resp.max())
    if peak <= 0:
        return np.zeros((0, 2))
    size = 2 * cfg.nms_radius + 1
    local_max = resp == scipy.ndimage.maximum_filter(resp, size=size, mode="nearest")
    keep = local_max & (resp >= cfg.response_rel_threshold * peak)
    # patches must fit entirely inside the image
    r = cfg.patch_radius
    keep[:r, :] = keep[-r:, :] = False
    keep[:, :r] = keep[:, -r:] = False
    ys, xs = np.nonzero(keep)
    if xs.size == 0:
        return np.zeros((0, 2))
    order = np.argsort(resp[ys, xs])[::-1][: cfg.max_corners]
    return np.column_stack([xs[order], ys[order]]).astype(np.float64)


def _descriptors(gray: np.ndarray, corners: np.ndarray, cfg: MatchConfig) -> np.ndarray:
    r = cfg.patch_radius
    d = np.empty((len(corners), (2 * r) ** 2))
    for i, (x, y) in enumerate(corners.astype(int)):
        patch = gray[y - r:y + r, x - r:x + r].astype(np.float64)
        patch = patch - patch.mean()
        norm = np.linalg.norm(patch)
        d[i] = (patch / norm).ravel() if norm > 1e-9 else 0.0
    return d


def builtin_match(ref: ImageBuffer, tgt: ImageBuffer, cfg: MatchConfig | None = None) -> Correspondences:
    """Detect and match corners between the two views.

    Returns correspondences with ``src`` in the target image and ``dst`` in
    the reference image. Raises InsufficientMatches when fewer than 8 mutual
    ratio-test survivors remain.
    """
    cfg = cfg or MatchConfig()
    for img in (ref, tgt):
        if img.width < 64 or img.height < 64:
            raise InvalidSize("matcher needs images of at least 64x64")
    gray_r = ref.luma()
    gray_t = tgt.luma()
    cr = _detect_corners(gray_r, cfg)
    ct = _detect_corners(gray_t, cfg)
    if len(cr) < 8 or len(ct) < 8:
        raise InsufficientMatches("not enough corners detected")
    dr = _descriptors(gray_r, cr, cfg)
    dt = _descriptors(gray_t, ct, cfg)

    # squared euclidean distances via the unit-norm dot product
    sim = dt @ dr.T                     # target rows vs reference columns
    dist = np.sqrt(np.maximum(2.0 - 2.0 * sim, 0.0))
    nn_r = np.argmin(dist, axis=1)
    best = dist[np.arange(len(ct)), nn_r]
    tmp = dist.copy()
    tmp[np.arange(len(ct)), nn_r] = np.inf
    second = tmp.min(axis=1)
    ratio_ok = best < cfg.ratio * np.maximum(second, 1e-12)
    nn_t = np.argmin(dist, axis=0)
    mutual = nn_t[nn_r] == np.arange(len(ct))
    sel = np.nonzero(ratio_ok & mutual)[0]
    if sel.size < 8:
        raise InsufficientMatches(f"only {sel.size} mutual matches survived")
    return Correspondences(src=ct[sel], dst=cr[nn_r[sel]])
