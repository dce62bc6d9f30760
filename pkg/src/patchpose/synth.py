"""Procedural source images for tests, demos and desk-scale training runs."""
from __future__ import annotations

import math

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage


def smooth_image(rng: np.random.Generator, height: int, width: int,
                 waves: int = 6, max_freq: float = 0.04) -> np.ndarray:
    """Band-limited RGB image made from a few low-frequency plane waves."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.empty((height, width, 3))
    for c in range(3):
        acc = np.zeros((height, width))
        for _ in range(waves):
            f = rng.uniform(0.005, max_freq)
            th = rng.uniform(0, 2 * math.pi)
            ph = rng.uniform(0, 2 * math.pi)
            acc += np.cos(2 * math.pi * f * (xx * math.cos(th) + yy * math.sin(th)) + ph)
        img[..., c] = 0.5 + 0.45 * acc / waves
    return np.clip(img, 0.0, 1.0)


def _random_color(rng):
    return tuple(int(v) for v in rng.integers(0, 256, size=3))


def textured_image(rng: np.random.Generator, height: int = 512, width: int = 512,
                   shapes: int = 220, supersample: int = 2) -> np.ndarray:
    """Clutter of random polygons, ellipses and strokes over a color ramp.

    Shapes span roughly 4 to 90 pixels so that patches carry structure at
    every scale of the 1/4..4 zoom range.
    """
    H, W = height * supersample, width * supersample
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    c0 = rng.uniform(0, 1, 3)
    c1 = rng.uniform(0, 1, 3)
    th = rng.uniform(0, 2 * math.pi)
    ramp = (xx * math.cos(th) + yy * math.sin(th)) / max(H, W)
    ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-12)
    bg = c0 + (c1 - c0) * ramp[..., None]
    canvas = Image.fromarray(np.round(bg * 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    for _ in range(shapes):
        size = math.exp(rng.uniform(math.log(4), math.log(90))) * supersample
        cx, cy = rng.uniform(0, W), rng.uniform(0, H)
        kind = rng.integers(0, 4)
        color = _random_color(rng)
        if kind == 0:
            n = int(rng.integers(3, 7))
            ang = np.sort(rng.uniform(0, 2 * math.pi, n))
            rad = size * rng.uniform(0.3, 1.0, n)
            pts = [(cx + r * math.cos(a), cy + r * math.sin(a)) for a, r in zip(ang, rad)]
            draw.polygon(pts, fill=color)
        elif kind == 1:
            a, b = size, size * rng.uniform(0.2, 0.7)
            phi = rng.uniform(0, math.pi)
            t = np.linspace(0, 2 * math.pi, 40, endpoint=False)
            px = cx + a * np.cos(t) * math.cos(phi) - b * np.sin(t) * math.sin(phi)
            py = cy + a * np.cos(t) * math.sin(phi) + b * np.sin(t) * math.cos(phi)
            draw.polygon(list(zip(px.tolist(), py.tolist())), fill=color)
        elif kind == 2:
            phi = rng.uniform(0, 2 * math.pi)
            end = (cx + size * math.cos(phi), cy + size * math.sin(phi))
            draw.line([(cx, cy), end], fill=color,
                      width=max(1, int(size * rng.uniform(0.05, 0.2))))
        else:
            # wedge: strongly oriented, no rotational symmetry
            phi = rng.uniform(0, 2 * math.pi)
            spread = rng.uniform(0.2, 0.8)
            pts = [(cx, cy),
                   (cx + size * math.cos(phi - spread), cy + size * math.sin(phi - spread)),
                   (cx + size * math.cos(phi + spread), cy + size * math.sin(phi + spread))]
            draw.polygon(pts, fill=color)
    img = np.asarray(canvas, dtype=np.float64) / 255.0
    if supersample > 1:
        img = img.reshape(height, supersample, width, supersample, 3).mean(axis=(1, 3))
    img = ndimage.gaussian_filter(img, sigma=(0.6, 0.6, 0))
    return np.clip(img, 0.0, 1.0)


def corner_image(height: int, width: int, corners, size: float = 10.0,
                 background: float = 0.5) -> np.ndarray:
    """Gray image with isolated soft X-junctions at ``corners`` (x, y)."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.full((height, width), background)
    for cx, cy in corners:
        dx, dy = xx - cx, yy - cy
        envelope = np.exp(-(dx ** 2 + dy ** 2) / (2 * (1.5 * size) ** 2))
        img += 0.45 * np.tanh(dx / 0.6) * np.tanh(dy / 0.6) * envelope
    return np.repeat(np.clip(img, 0, 1)[..., None], 3, axis=2)
