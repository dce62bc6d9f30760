"""Similarity warps of image regions and pose extraction from homographies.

Coordinates are ``(x, y)`` pixels with ``y`` pointing down. A warp with
``scale_factor`` s and ``angle`` theta maps a source offset ``p`` from the
keypoint to the patch offset ``s * R(theta) @ p`` with
``R(theta) = [[cos, -sin], [sin, cos]]``; on screen a positive angle turns
content clockwise because ``y`` points down. Patches are channels-first
``(3, H, W)`` float arrays in [0, 1].
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image

TWO_PI = 2.0 * math.pi
CROP_SIZE = 64
PATCH_SIZE = 32
MAX_SCALE = 4.0


class OutOfBoundsError(ValueError):
    """The warped crop footprint leaves the source image."""


class DegenerateHomographyError(ValueError):
    pass


def load_image(path) -> np.ndarray:
    """Read a PNG/JPEG as an ``(H, W, 3)`` float64 array in [0, 1]."""
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    return rgb / 255.0


def save_image(path, img: np.ndarray) -> None:
    """Write an ``(H, W, 3)`` or ``(3, H, W)`` float image as 8-bit PNG."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 3 and img.shape[-1] != 3:
        img = img.transpose(1, 2, 0)
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(Path(path))


def footprint_radius(crop: int = CROP_SIZE, scale_factor: float = 1.0 / MAX_SCALE) -> float:
    """Farthest source distance from the keypoint touched by a crop."""
    return (crop - 1) / 2.0 * math.sqrt(2.0) / scale_factor


def worst_case_margin(crop: int = CROP_SIZE) -> int:
    """Border that keeps every grid transform inside the image."""
    return int(math.ceil(crop * MAX_SCALE * math.sqrt(2.0) / 2.0))


def sample_grid(center, scale_factor, angle, crop: int):
    """Source coordinates for every crop pixel, shape ``(K, crop, crop)`` each."""
    scale_factor = np.atleast_1d(np.asarray(scale_factor, dtype=np.float64))
    angle = np.atleast_1d(np.asarray(angle, dtype=np.float64))
    offs = np.arange(crop, dtype=np.float64) - (crop - 1) / 2.0
    u = offs[None, None, :]
    v = offs[None, :, None]
    c = (np.cos(angle) / scale_factor)[:, None, None]
    s = (np.sin(angle) / scale_factor)[:, None, None]
    xs = center[0] + c * u + s * v
    ys = center[1] - s * u + c * v
    return xs, ys


def bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``img`` (H, W, C) at real coordinates; returns ``xs.shape + (C,)``."""
    h, w = img.shape[:2]
    if xs.min() < 0 or ys.min() < 0 or xs.max() > w - 1 or ys.max() > h - 1:
        raise OutOfBoundsError(
            f"footprint x[{xs.min():.1f}, {xs.max():.1f}] y[{ys.min():.1f}, {ys.max():.1f}] "
            f"exceeds image {w}x{h}")
    x0 = np.minimum(np.floor(xs).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h - 2)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x0 + 1] * fx
    bot = img[y0 + 1, x0] * (1 - fx) + img[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def area_downsample(patches: np.ndarray, out: int) -> np.ndarray:
    """Box-average ``(..., C, n, n)`` down to ``(..., C, out, out)``."""
    n = patches.shape[-1]
    if n % out:
        raise ValueError(f"crop {n} is not a multiple of output size {out}")
    f = n // out
    if f == 1:
        return patches
    shp = patches.shape[:-2] + (out, f, out, f)
    return patches.reshape(shp).mean(axis=(-3, -1))


def warp_extract_many(img, center, scale_factors, angles, crop: int = CROP_SIZE,
                      out: int = PATCH_SIZE) -> np.ndarray:
    """Batched :func:`warp_extract`; returns ``(K, 3, out, out)``."""
    scale_factors, angles = np.broadcast_arrays(
        np.atleast_1d(np.asarray(scale_factors, dtype=np.float64)),
        np.atleast_1d(np.asarray(angles, dtype=np.float64)))
    xs, ys = sample_grid(center, scale_factors, angles, crop)
    sampled = bilinear(np.asarray(img, dtype=np.float64), xs, ys)
    return area_downsample(sampled.transpose(0, 3, 1, 2), out)


def warp_extract(img, center, scale_factor: float = 1.0, angle: float = 0.0,
                 crop: int = CROP_SIZE, out: int = PATCH_SIZE) -> np.ndarray:
    """Crop a ``crop`` x ``crop`` window around ``center`` after rescaling the
    image by ``scale_factor`` and rotating it by ``angle`` about that center,
    then box-filter it to ``out`` x ``out``.

    Raises OutOfBoundsError when the back-projected window is not inside the
    image.
    """
    return warp_extract_many(img, center, scale_factor, angle, crop, out)[0]


def similarity_homography(scale_factor: float, angle: float, a33: float = 1.0) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    a = np.array([[scale_factor * c, -scale_factor * s, 0.0],
                  [scale_factor * s, scale_factor * c, 0.0],
                  [0.0, 0.0, 1.0]])
    return a33 * a


def pose_from_homography(A) -> tuple[float, float]:
    """Scale factor and rotation in [0, 2*pi) of the upper-left 2x2 block.

    Uses atan2 rather than a plain arctangent so that opposite rotations are
    not folded onto each other.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.shape != (3, 3):
        raise ValueError(f"homography must be 3x3, got {A.shape}")
    if A[2, 2] == 0:
        raise DegenerateHomographyError("A33 must be non-zero")
    if abs(np.linalg.det(A / A[2, 2])) <= 1e-12:
        raise DegenerateHomographyError("homography is singular")
    a11 = A[0, 0] / A[2, 2]
    a21 = A[1, 0] / A[2, 2]
    if a11 == 0 and a21 == 0:
        raise DegenerateHomographyError("A11 and A21 are both zero")
    scale = math.hypot(a11, a21)
    angle = math.atan2(a21, a11) % TWO_PI
    if angle >= TWO_PI:
        angle = 0.0
    return scale, angle
