"""Training data: full-image (gray, gradient, halftone) triples and aligned
32x32 patch triples stacked into mini-batches.

Halftone and gradient maps are always computed on the whole image and then
cropped. Error diffusion is causal across the image, so halftoning a crop is
not the same as cropping the halftone.
"""

import logging
import os
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .halftone import error_diffuse_fs, sobel_gradient
from .imageio import image_suffixes, load_gray

log = logging.getLogger(__name__)

PATCH_SIZE = 32
CACHE_MAGIC = b"SAHTDAT1"
CACHE_VERSION = 1


@dataclass
class ImageTriple:
    gray: np.ndarray
    gradient: np.ndarray
    halftone: np.ndarray
    source_id: str

    @property
    def shape(self):
        return self.gray.shape


@dataclass
class PatchTriple:
    gray_patch: np.ndarray
    gradient_patch: np.ndarray
    halftone_patch: np.ndarray
    origin: tuple  # (source_id, y, x)


@dataclass
class Batch:
    halftone: np.ndarray
    gray: np.ndarray
    gradient: np.ndarray

    def __len__(self):
        return self.halftone.shape[0]


def make_triple(gray, source_id="", serpentine=False):
    gray = np.asarray(gray, dtype=np.float64)
    return ImageTriple(gray=gray, gradient=sobel_gradient(gray),
                       halftone=error_diffuse_fs(gray, serpentine), source_id=source_id)


def list_images(directory):
    suffixes = image_suffixes()
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(suffixes))
    return [os.path.join(directory, n) for n in names]


def ingest_corpus(directory, serpentine=False, min_size=PATCH_SIZE, workers=None):
    """One ImageTriple per readable image in ``directory`` (sorted by name).

    Unreadable files and images smaller than ``min_size`` are skipped with a
    warning. An empty result is an error.
    """
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"corpus directory not found: {directory}")
    paths = list_images(directory)

    def load(path):
        name = os.path.basename(path)
        try:
            gray = load_gray(path)
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable image %s: %s", name, exc)
            return None
        if min(gray.shape) < min_size:
            log.warning("skipping %s: %dx%d is smaller than %dx%d", name,
                        gray.shape[1], gray.shape[0], min_size, min_size)
            return None
        return make_triple(gray, name, serpentine)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        triples = [t for t in pool.map(load, paths) if t is not None]
    if not triples:
        raise ValueError(f"no usable images in corpus directory {directory}")
    return triples


def split_holdout(triples, fraction, seed=0):
    """(train, holdout); holdout gets floor(fraction * n) images, chosen by seed."""
    n_hold = int(np.floor(fraction * len(triples)))
    if n_hold <= 0:
        return list(triples), []
    order = np.random.default_rng(seed).permutation(len(triples))
    hold = set(order[:n_hold].tolist())
    train = [t for i, t in enumerate(triples) if i not in hold]
    return train, [t for i, t in enumerate(triples) if i in hold]


def crop(triple, y, x, size=PATCH_SIZE):
    sl = (slice(y, y + size), slice(x, x + size))
    return PatchTriple(triple.gray[sl].copy(), triple.gradient[sl].copy(),
                       triple.halftone[sl].copy(), (triple.source_id, int(y), int(x)))


def sample_patches(triples, count, seed, size=PATCH_SIZE):
    """``count`` patches: uniform source image, uniform valid corner, with replacement.

    ``seed`` is anything ``numpy.random.default_rng`` accepts.
    """
    if count == 0:
        return []
    for t in triples:
        if min(t.shape) < size:
            raise ValueError(f"image {t.source_id!r} of shape {t.shape} is smaller than {size}x{size}")
    rng = np.random.default_rng(seed)
    heights = np.array([t.shape[0] for t in triples])
    widths = np.array([t.shape[1] for t in triples])
    src = rng.integers(0, len(triples), size=count)
    ys = rng.integers(0, heights[src] - size + 1)
    xs = rng.integers(0, widths[src] - size + 1)
    return [crop(triples[s], y, x, size) for s, y, x in zip(src, ys, xs)]


def make_batch(patches, batch_size=None, dtype=np.float32):
    if batch_size is not None and len(patches) != batch_size:
        raise ValueError(f"expected {batch_size} patches, got {len(patches)}")
    if not patches:
        raise ValueError("cannot build an empty batch")

    def stack(attr):
        return np.stack([getattr(p, attr) for p in patches])[:, None].astype(dtype)

    return Batch(halftone=stack("halftone_patch"), gray=stack("gray_patch"),
                 gradient=stack("gradient_patch"))


def save_patch_cache(patches, path):
    """Frozen patch pool on disk: same container layout as checkpoints."""
    size = patches[0].gray_patch.shape[0] if patches else PATCH_SIZE
    parts = [CACHE_MAGIC, struct.pack("<III", CACHE_VERSION, len(patches), size)]
    for p in patches:
        sid = p.origin[0].encode("utf-8")
        parts.append(struct.pack("<I", len(sid)) + sid + struct.pack("<II", p.origin[1], p.origin[2]))
        for arr in (p.gray_patch, p.gradient_patch, p.halftone_patch):
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def load_patch_cache(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 24 or data[:8] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a patch cache (bad magic at offset 0)")
    if struct.unpack("<I", data[-4:])[0] != zlib.crc32(data[:-4]):
        raise ValueError(f"{path}: CRC mismatch at offset {len(data) - 4}")
    version, count, size = struct.unpack_from("<III", data, 8)
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version} at offset 8")
    pos = 20
    nbytes = size * size * 8
    patches = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        sid = data[pos + 4:pos + 4 + n].decode("utf-8")
        pos += 4 + n
        y, x = struct.unpack_from("<II", data, pos)
        pos += 8
        arrs = []
        for _ in range(3):
            if pos + nbytes > len(data) - 4:
                raise ValueError(f"{path}: truncated at offset {pos}")
            arrs.append(np.frombuffer(data, "<f8", size * size, pos).reshape(size, size).copy())
            pos += nbytes
        patches.append(PatchTriple(*arrs, (sid, y, x)))
    return patches
