"""Forward halftoning pipeline: grayscale conversion, Floyd-Steinberg error
diffusion and normalized Sobel gradient-magnitude maps.

All images are 2-D float arrays in [0, 1].
"""

import numpy as np

from . import kernels

# BT.601 luma
LUMA = np.array([0.299, 0.587, 0.114])

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T
# largest |grad| attainable on [0, 1] input is 4*sqrt(2)
SOBEL_SCALE = 1.0 / (4.0 * np.sqrt(2.0))


def to_grayscale(image):
    """8-bit RGB (H, W, 3) or gray (H, W) to floats in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] == 4:
            img = img[..., :3]
        if img.shape[2] != 3:
            raise ValueError(f"expected RGB image, got shape {img.shape}")
        gray = img @ LUMA / 255.0
    elif img.ndim == 2:
        gray = img / 255.0
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got shape {img.shape}")
    return np.clip(gray, 0.0, 1.0)


def error_diffuse_fs(gray, serpentine=False):
    """Binary (0.0/1.0) Floyd-Steinberg halftone of ``gray``.

    Raster scan, threshold ``>= 0.5`` maps to 1, error shared 7/16 right,
    3/16 below-left, 5/16 below, 1/16 below-right; shares that fall outside
    the image are dropped. ``serpentine`` reverses the scan (and mirrors the
    weights) on odd rows.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {gray.shape}")
    if gray.size and (not np.isfinite(gray).all() or gray.min() < 0.0 or gray.max() > 1.0):
        raise ValueError("error diffusion input must lie in [0, 1]; clamp it first")
    work = np.array(gray, dtype=np.float64, order="C")
    return kernels.error_diffuse_fs(work, serpentine).astype(np.float64)


def sobel_gradient(gray):
    """Sobel gradient magnitude scaled into [0, 1] (replicate borders)."""
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2 or gray.shape[0] < 3 or gray.shape[1] < 3:
        raise ValueError(f"sobel_gradient needs an image of at least 3x3, got shape {gray.shape}")
    p = np.pad(gray, 1, mode="edge")
    # separable form of SOBEL_X / SOBEL_Y: central difference, then [1, 2, 1]
    # smoothing across it; differences of equal pixels are exactly zero
    dx = p[:, 2:] - p[:, :-2]
    dy = p[2:, :] - p[:-2, :]
    gx = dx[:-2] + 2.0 * dx[1:-1] + dx[2:]
    gy = dy[:, :-2] + 2.0 * dy[:, 1:-1] + dy[:, 2:]
    return np.clip(np.hypot(gx, gy) * SOBEL_SCALE, 0.0, 1.0)
