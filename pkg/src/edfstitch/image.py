"""Raster container shared by the pipeline: 8-bit storage, float compute,
per-pixel validity mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ImageBuffer:
    """(H, W) grayscale or (H, W, 3) RGB uint8 raster with a validity mask."""

    data: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.data.dtype != np.uint8:
            raise ValueError("ImageBuffer stores uint8 data")
        if self.data.ndim == 3 and self.data.shape[2] not in (1, 3):
            raise ValueError("ImageBuffer supports 1 or 3 channels")
        if self.data.ndim == 3 and self.data.shape[2] == 1:
            self.data = self.data[:, :, 0]
        if self.mask is None:
            self.mask = np.ones(self.data.shape[:2], dtype=bool)
        self.mask = self.mask.astype(bool)
        if self.mask.shape != self.data.shape[:2]:
            raise ValueError("mask shape must match image shape")

    @classmethod
    def from_array(cls, data: np.ndarray, mask: np.ndarray | None = None) -> "ImageBuffer":
        data = np.asarray(data)
        if data.dtype != np.uint8:
            data = np.clip(np.round(data), 0, 255).astype(np.uint8)
        return cls(data=data, mask=mask)

    @classmethod
    def zeros(cls, width: int, height: int, channels: int = 3) -> "ImageBuffer":
        shape = (height, width) if channels == 1 else (height, width, channels)
        return cls(data=np.zeros(shape, dtype=np.uint8),
                   mask=np.zeros((height, width), dtype=bool))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else self.data.shape[2]

    def to_float(self) -> np.ndarray:
        """(H, W, C) float64 view of the pixel data."""
        f = self.data.astype(np.float64)
        if f.ndim == 2:
            f = f[:, :, None]
        return f

    def luma(self) -> np.ndarray:
        """Rec.601 luma as (H, W) float64."""
        if self.channels == 1:
            return self.data.astype(np.float64)
        f = self.data.astype(np.float64)
        return 0.299 * f[:, :, 0] + 0.587 * f[:, :, 1] + 0.114 * f[:, :, 2]


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample float image (H, W, C) at fractional coordinates.

    Returns (values, inside) where ``inside`` marks samples whose full 2x2
    bilinear support lies within the raster; values outside are zero. Never
    reads outside the raster.
    """
    h, w = img.shape[:2]
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    finite = np.isfinite(xs) & np.isfinite(ys)
    xs_safe = np.where(finite, xs, 0.0)
    ys_safe = np.where(finite, ys, 0.0)
    x0 = np.floor(xs_safe).astype(np.int64)
    y0 = np.floor(ys_safe).astype(np.int64)
    inside = finite & (xs_safe >= 0) & (ys_safe >= 0) & (xs_safe <= w - 1) & (ys_safe <= h - 1)
    x0c = np.clip(x0, 0, w - 2) if w > 1 else np.zeros_like(x0)
    y0c = np.clip(y0, 0, h - 2) if h > 1 else np.zeros_like(y0)
    fx = np.clip(xs_safe - x0c, 0.0, 1.0)
    fy = np.clip(ys_safe - y0c, 0.0, 1.0)
    im = img if img.ndim == 3 else img[:, :, None]
    Ia = im[y0c, x0c]
    Ib = im[y0c, x0c + 1]
    Ic = im[y0c + 1, x0c]
    Id = im[y0c + 1, x0c + 1]
    wa = ((1 - fx) * (1 - fy))[..., None]
    wb = (fx * (1 - fy))[..., None]
    wc = ((1 - fx) * fy)[..., None]
    wd = (fx * fy)[..., None]
    out = Ia * wa + Ib * wb + Ic * wc + Id * wd
    out[~inside] = 0.0
    if img.ndim == 2:
        out = out[..., 0]
    return out, inside
