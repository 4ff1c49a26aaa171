"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise the numpy/Python
fallback. Set ``SADCNN_PURE_PYTHON=1`` to force the fallback.
"""

import logging
import os

from . import _pykernels

log = logging.getLogger(__name__)

_FORCE_PY = os.environ.get("SADCNN_PURE_PYTHON", "") not in ("", "0")

try:
    if _FORCE_PY:
        raise ImportError("forced by SADCNN_PURE_PYTHON")
    from . import _ckernels as _impl
    BACKEND = "cython"
except ImportError as exc:  # pragma: no cover - depends on the build
    log.debug("compiled kernels unavailable (%s), using python fallback", exc)
    _impl = _pykernels
    BACKEND = "python"

_num_threads = 1


def available_backends():
    names = ["python"]
    if BACKEND == "cython":
        names.insert(0, "cython")
    return names


def get_backend(name=None):
    """Module implementing the kernel API; ``None`` means the active one."""
    if name is None or name == BACKEND:
        return _impl
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def set_num_threads(n):
    """Cap threads for the compiled loops and for BLAS."""
    global _num_threads
    n = max(1, int(n))
    _num_threads = n
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return
    threadpool_limits(limits=n)


def get_num_threads():
    return _num_threads


def error_diffuse_fs(work, serpentine=False):
    return _impl.error_diffuse_fs(work, serpentine)


def im2col(x, k, pad, y0, y1):
    return _impl.im2col(x, k, pad, y0, y1)


def conv2d_direct_forward(x, w, b, pad):
    return _impl.conv2d_direct_forward(x, w, b, pad, _num_threads)


def conv2d_direct_backward(x, w, g, pad):
    return _impl.conv2d_direct_backward(x, w, g, pad, _num_threads)
