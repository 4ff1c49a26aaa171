"""Seeded synthetic continuous-tone images for smoke tests and demos.

Each image mixes smooth shading, flat shapes with soft edges, sinusoidal
gratings and thin lines, giving flat areas, edges and texture in one frame.
"""

import os

import numpy as np
from scipy.ndimage import gaussian_filter, zoom

from .imageio import write_image


def _smooth_field(rng, h, w, scale):
    coarse = rng.random((max(2, h // scale), max(2, w // scale)))
    field = zoom(coarse, (h / coarse.shape[0], w / coarse.shape[1]), order=3)[:h, :w]
    field = gaussian_filter(field, scale / 4)
    field -= field.min()
    return field / max(field.max(), 1e-9)


def synth_image(rng, h=96, w=96, color=True):
    """uint8 image, (h, w, 3) when ``color`` else (h, w)."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = 0.2 + 0.6 * _smooth_field(rng, h, w, 24)
    for _ in range(rng.integers(2, 6)):
        kind = rng.integers(0, 3)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(6, h / 3), rng.uniform(6, w / 3)
        if kind == 0:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        elif kind == 1:
            mask = (np.abs(yy - cy) <= ry / 1.5) & (np.abs(xx - cx) <= rx / 1.5)
        else:
            theta = rng.uniform(0, np.pi)
            mask = np.abs(np.cos(theta) * (xx - cx) + np.sin(theta) * (yy - cy)) <= rx / 3
        mask = gaussian_filter(mask.astype(np.float64), 0.7)
        if rng.random() < 0.4:
            theta = rng.uniform(0, np.pi)
            period = rng.uniform(4.0, 12.0)
            phase = 2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / period
            fill = 0.5 + rng.uniform(0.15, 0.4) * np.sin(phase)
        else:
            fill = np.full((h, w), rng.uniform(0.05, 0.95))
        img = img * (1 - mask) + fill * mask
    for _ in range(rng.integers(0, 4)):
        y0, x0, y1, x1 = rng.uniform(0, h), rng.uniform(0, w), rng.uniform(0, h), rng.uniform(0, w)
        t = np.clip(((xx - x0) * (x1 - x0) + (yy - y0) * (y1 - y0))
                    / max((x1 - x0) ** 2 + (y1 - y0) ** 2, 1e-9), 0, 1)
        dist = np.hypot(xx - (x0 + t * (x1 - x0)), yy - (y0 + t * (y1 - y0)))
        line = np.clip(1.5 - dist, 0, 1)
        img = img * (1 - line) + rng.choice([0.05, 0.95]) * line
    img = np.clip(img, 0.0, 1.0)
    if not color:
        return np.floor(img * 255 + 0.5).astype(np.uint8)
    tint = rng.uniform(0.85, 1.15, size=3)
    rgb = np.clip(img[..., None] * tint, 0, 1)
    return np.floor(rgb * 255 + 0.5).astype(np.uint8)


def write_corpus(directory, count, size=96, seed=0, color=True):
    """Write ``count`` images as PPM (color) or PGM files; returns the paths."""
    os.makedirs(directory, exist_ok=True)
    rng = np.random.default_rng(seed)
    suffix = ".ppm" if color else ".pgm"
    paths = []
    for i in range(count):
        h, w = (size, size) if np.isscalar(size) else size
        path = os.path.join(directory, f"synth_{i:03d}{suffix}")
        write_image(path, synth_image(rng, h, w, color))
        paths.append(path)
    return paths
