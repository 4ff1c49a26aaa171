"""Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only.

PNG goes through Pillow when it is installed (``PNG_ENABLED``).
"""

import os

import numpy as np

try:
    from PIL import Image
    PNG_ENABLED = True
except ImportError:  # pragma: no cover
    Image = None
    PNG_ENABLED = False

NETPBM_SUFFIXES = (".pgm", ".ppm", ".pnm")
PNG_SUFFIXES = (".png",)


class ImageFormatError(ValueError):
    pass


def image_suffixes():
    return NETPBM_SUFFIXES + (PNG_SUFFIXES if PNG_ENABLED else ())


def _header_tokens(data, path):
    """The four header tokens and the offset of the first raster byte."""
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < 4:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise ImageFormatError(f"{path}: truncated header after {len(tokens)} tokens")
        if data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    if pos >= n:
        raise ImageFormatError(f"{path}: missing whitespace after maxval")
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def read_netpbm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, offset = _header_tokens(data, path)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported magic {magic!r} (need P5 or P6)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: non-integer header field in {tokens[1:]}") from None
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    body = data[offset:offset + need]
    if len(body) < need:
        raise ImageFormatError(f"{path}: truncated raster, {len(body)} of {need} bytes")
    arr = np.frombuffer(body, dtype=np.uint8).copy()
    return arr.reshape(height, width, 3) if channels == 3 else arr.reshape(height, width)


def read_image(path):
    """uint8 array: (H, W) for gray files, (H, W, 3) for color."""
    path = os.fspath(path)
    suffix = os.path.splitext(path)[1].lower()
    if suffix in PNG_SUFFIXES:
        if not PNG_ENABLED:
            raise ImageFormatError(f"{path}: PNG support needs Pillow")
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
            return np.asarray(im, dtype=np.uint8).copy()
    return read_netpbm(path)


def quantize(image):
    """Floats in [0, 1] to bytes: round half up, clamped."""
    img = np.asarray(image, dtype=np.float64)
    return np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_image(path, image):
    """Write a gray (H, W) or color (H, W, 3) image.

    Float input is quantized from [0, 1]; uint8 input is written as is. The
    format follows the suffix: .png via Pillow, otherwise P5/P6.
    """
    path = os.fspath(path)
    img = np.asarray(image)
    data = img if img.dtype == np.uint8 else quantize(img)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[..., 0]
    if data.ndim not in (2, 3) or (data.ndim == 3 and data.shape[2] != 3):
        raise ValueError(f"cannot write image of shape {img.shape}")
    suffix = os.path.splitext(path)[1].lower()
    if suffix in PNG_SUFFIXES:
        if not PNG_ENABLED:
            raise ImageFormatError(f"{path}: PNG support needs Pillow")
        Image.fromarray(data).save(path)
        return
    magic = b"P6" if data.ndim == 3 else b"P5"
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"%s\n%d %d\n255\n" % (magic, w, h))
        fh.write(np.ascontiguousarray(data).tobytes())


def load_gray(path):
    """Read any supported file and return gray floats in [0, 1]."""
    from .halftone import to_grayscale
    return to_grayscale(read_image(path))
