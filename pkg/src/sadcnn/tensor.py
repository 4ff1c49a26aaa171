"""Minimal differentiable layers on 4-D (N, C, H, W) float arrays.

Only what the networks here need: stride-1 "same" convolution, ReLU, channel
concatenation, mean-squared-error loss and (momentum) SGD. Gradients are
written by hand; ``finite_difference_check`` verifies them numerically.

Convolution is cross-correlation (no kernel flip) with zero padding of
``(k - 1) // 2`` so spatial size is preserved. The default ``"gemm"`` method
goes through im2col and a matrix multiply; ``"direct"`` runs the nested-loop
kernel and serves as the reference.
"""

import numpy as np

from . import kernels

# unfolded matrices are built in horizontal bands of about this size, so each
# band is consumed by the matrix multiply while it is still in cache
BAND_BYTES = 1 << 19


class ShapeError(ValueError):
    pass


def _check_4d(name, a):
    if a.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W), got shape {a.shape}")


class ConvParams:
    """Weights (m, c, k, k), bias (m,), their gradients and momentum buffers."""

    def __init__(self, weights, bias=None):
        weights = np.ascontiguousarray(weights)
        if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
            raise ShapeError(f"weights must have shape (m, c, k, k), got {weights.shape}")
        if weights.shape[2] % 2 != 1:
            raise ShapeError(f"kernel size must be odd, got {weights.shape[2]}")
        if bias is None:
            bias = np.zeros(weights.shape[0], dtype=weights.dtype)
        bias = np.ascontiguousarray(bias, dtype=weights.dtype)
        if bias.shape != (weights.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} does not match {weights.shape[0]} filters")
        self.weights = weights
        self.bias = bias
        self.weight_grad = np.zeros_like(weights)
        self.bias_grad = np.zeros_like(bias)
        self.weight_velocity = np.zeros_like(weights)
        self.bias_velocity = np.zeros_like(bias)

    @classmethod
    def he_normal(cls, out_channels, in_channels, k, rng, dtype=np.float32):
        std = np.sqrt(2.0 / (in_channels * k * k))
        w = rng.normal(0.0, std, size=(out_channels, in_channels, k, k))
        return cls(w.astype(dtype), np.zeros(out_channels, dtype=dtype))

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def kernel_size(self):
        return self.weights.shape[2]

    @property
    def size(self):
        return self.weights.size + self.bias.size

    def zero_grad(self):
        self.weight_grad[...] = 0
        self.bias_grad[...] = 0

    def astype(self, dtype):
        p = ConvParams(self.weights.astype(dtype), self.bias.astype(dtype))
        p.weight_velocity[...] = self.weight_velocity
        p.bias_velocity[...] = self.bias_velocity
        return p

    def copy(self):
        return self.astype(self.weights.dtype)

    def __repr__(self):
        m, c, k, _ = self.weights.shape
        return f"ConvParams({c}->{m}, k={k}, {self.weights.dtype})"


def _same_pad(params, pad):
    k = params.kernel_size
    if pad is None:
        return (k - 1) // 2
    if pad != (k - 1) // 2:
        raise ShapeError(f"pad must be (k-1)/2 = {(k - 1) // 2} for a {k}x{k} kernel, got {pad}")
    return pad


def _band_rows(n, w, h, row_elems, itemsize):
    return max(1, min(h, BAND_BYTES // max(n * w * row_elems * itemsize, 1)))


def _unfold_correlate(xh, wmat, k, pad):
    """Channels-last correlation through im2col: cols (NHW, k*k*C) @ wmat (k*k*C, O)."""
    n, h, w, c = xh.shape
    o = wmat.shape[1]
    out = np.empty((n, h, w, o), dtype=xh.dtype)
    band = _band_rows(n, w, h, k * k * c, xh.itemsize)
    for y0 in range(0, h, band):
        y1 = min(h, y0 + band)
        part = kernels.im2col(xh, k, pad, y0, y1)
        out[:, y0:y1] = (part @ wmat).reshape(n, y1 - y0, w, o)
    return out


def _fold_correlate(xh, wfold, k, pad):
    """Channels-last correlation for few output channels.

    Every input pixel is multiplied by all k*k taps at once, giving one
    (O, N, rows, W) plane per tap, and the shifted planes are summed into the
    output. This touches k*k*O values per pixel instead of the k*k*C an
    im2col needs. ``wfold`` has shape (k*k*O, C).
    """
    n, h, w, c = xh.shape
    o = wfold.shape[0] // (k * k)
    out = np.zeros((o, n, h, w), dtype=xh.dtype)
    band = _band_rows(n, w, h, k * k * o, xh.itemsize)
    for y0 in range(0, h, band):
        y1 = min(h, y0 + band)
        a, b = max(0, y0 - pad), min(h, y1 + pad)
        taps = (wfold @ xh[:, a:b].reshape(-1, c).T).reshape(k, k, o, n, b - a, w)
        for i in range(k):
            ylo, yhi = max(y0, pad - i), min(y1, h + pad - i)
            if ylo >= yhi:
                continue
            src_y = slice(ylo + i - pad - a, yhi + i - pad - a)
            for j in range(k):
                xlo, xhi = max(0, pad - j), min(w, w + pad - j)
                if xlo < xhi:
                    out[:, :, ylo:yhi, xlo:xhi] += taps[i, j, :, :, src_y, xlo + j - pad:xhi + j - pad]
    return out.transpose(1, 2, 3, 0)


def _correlate(xh, weights, pad):
    """Same-padded correlation of NHWC ``xh`` with (O, C, k, k) ``weights``,
    using whichever unfolding is cheaper."""
    o, c, k, _ = weights.shape
    if o < c:
        wfold = np.ascontiguousarray(weights.transpose(2, 3, 0, 1).reshape(k * k * o, c))
        return _fold_correlate(xh, wfold, k, pad)
    return _unfold_correlate(xh, _wmat(weights), k, pad)


def _nhwc(a):
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1))


def _nchw(a):
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2))


def _wmat(weights):
    # (O, C, k, k) -> (k*k*C, O), matching im2col's (i, j, c) column order
    o, c, k, _ = weights.shape
    return np.ascontiguousarray(weights.transpose(2, 3, 1, 0).reshape(k * k * c, o))


def _conv_forward(x, params, pad, method):
    """Returns (out NCHW, channels-last copy of the input or None)."""
    _check_4d("input", x)
    if x.shape[1] != params.in_channels:
        raise ShapeError(
            f"input channels {x.shape[1]} (input shape {x.shape}) do not match "
            f"weight channels {params.in_channels} (weight shape {params.weights.shape})")
    if x.dtype != params.weights.dtype:
        x = x.astype(params.weights.dtype)
    x = np.ascontiguousarray(x)
    pad = _same_pad(params, pad)
    if method == "direct":
        return kernels.conv2d_direct_forward(x, params.weights, params.bias, pad), None
    if method != "gemm":
        raise ValueError(f"unknown conv method {method!r}")
    xh = _nhwc(x)
    out = _correlate(xh, params.weights, pad)
    out += params.bias
    return _nchw(out), xh


def conv2d_forward(x, params, pad=None, method="gemm"):
    """out[n,o,y,x] = bias[o] + sum_{c,i,j} w[o,c,i,j] * x[n,c,y+i-pad,x+j-pad]."""
    return _conv_forward(x, params, pad, method)[0]


def conv2d_backward(x, params, grad_out, pad=None, method="gemm", x_nhwc=None,
                    need_input_grad=True):
    """Accumulate weight/bias gradients into ``params``; return grad wrt ``x``.

    ``x_nhwc`` may carry the channels-last input kept by the forward pass.
    """
    _check_4d("grad_out", grad_out)
    n, c, h, w = x.shape
    expected = (n, params.out_channels, h, w)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    if x.shape[1] != params.in_channels:
        raise ShapeError(f"input shape {x.shape} does not match weight shape {params.weights.shape}")
    dtype = params.weights.dtype
    x = np.ascontiguousarray(x, dtype=dtype)
    grad_out = np.ascontiguousarray(grad_out, dtype=dtype)
    pad = _same_pad(params, pad)
    k = params.kernel_size

    if method == "direct":
        gx, gw, gb = kernels.conv2d_direct_backward(x, params.weights, grad_out, pad)
        params.weight_grad += gw
        params.bias_grad += gb
        return gx if need_input_grad else None
    if method != "gemm":
        raise ValueError(f"unknown conv method {method!r}")

    o = params.out_channels
    params.bias_grad += grad_out.sum(axis=(0, 2, 3))
    gh = _nhwc(grad_out)
    xh = x_nhwc if x_nhwc is not None else _nhwc(x)
    # im2col whichever side has fewer channels. Unfolding the gradient works
    # because column (k-1-i, k-1-j, o) of im2col(grad) at pixel u holds
    # grad[u - (i, j) + pad, o].
    unfolded, plain = (gh, xh) if o < c else (xh, gh)
    cu, cp = unfolded.shape[3], plain.shape[3]
    band = _band_rows(n, w, h, k * k * cu, x.itemsize)
    acc = np.zeros((k * k * cu, cp), dtype=dtype)
    for y0 in range(0, h, band):
        y1 = min(h, y0 + band)
        part = kernels.im2col(unfolded, k, pad, y0, y1)
        acc += part.T @ plain[:, y0:y1].reshape(-1, cp)
    if o < c:
        params.weight_grad += acc.reshape(k, k, o, c)[::-1, ::-1].transpose(2, 3, 0, 1)
    else:
        params.weight_grad += acc.reshape(k, k, c, o).transpose(3, 2, 0, 1)

    if not need_input_grad:
        return None
    # transpose of a same-padded correlation: correlate with the flipped,
    # channel-swapped kernel
    flipped = params.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    gx = _correlate(gh, flipped, pad)
    return _nchw(gx)


def relu_forward(x):
    """Returns (max(x, 0), mask) where mask marks x > 0."""
    mask = x > 0
    return np.maximum(x, 0), mask


def relu_backward(mask, grad_out):
    if mask.shape != grad_out.shape:
        raise ShapeError(f"mask shape {mask.shape} != grad_out shape {grad_out.shape}")
    return grad_out * mask


def concat_channels(parts):
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = parts[0].shape
    for idx, p in enumerate(parts):
        _check_4d(f"part {idx}", p)
        if (p.shape[0], p.shape[2], p.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"part {idx} has shape {p.shape}, incompatible with part 0 shape {ref}")
    return np.concatenate(parts, axis=1)


def split_channels(grad, sizes):
    """Inverse of concat_channels: per-part slices of ``grad`` (copies)."""
    if sum(sizes) != grad.shape[1]:
        raise ShapeError(f"channel sizes {list(sizes)} do not sum to {grad.shape[1]}")
    bounds = np.cumsum([0, *sizes])
    return [np.array(grad[:, a:b]) for a, b in zip(bounds[:-1], bounds[1:])]


def mse_loss(pred, target):
    """Mean over all elements of (pred - target)^2 and its gradient wrt pred."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    diff = pred - target.astype(pred.dtype, copy=False)
    k = diff.size
    loss = float(np.dot(diff.ravel().astype(np.float64), diff.ravel().astype(np.float64)) / k)
    return loss, (2.0 / k) * diff


def sgd_step(params, lr, momentum=0.0):
    """v <- momentum*v - lr*grad; w <- w + v; then zero the gradients."""
    for p in params:
        for w, g, v in ((p.weights, p.weight_grad, p.weight_velocity),
                        (p.bias, p.bias_grad, p.bias_velocity)):
            v *= momentum
            v -= lr * g
            w += v
        p.zero_grad()


class Conv2d:
    def __init__(self, params, method="gemm"):
        self.params = params
        self.method = method
        self._x = None
        self._xh = None

    def forward(self, x, train=True):
        out, xh = _conv_forward(x, self.params, None, self.method)
        self._x = x if train else None
        self._xh = xh if train else None
        return out

    def backward(self, grad_out, need_input_grad=True):
        if self._x is None:
            raise RuntimeError("Conv2d.backward called before forward")
        gx = conv2d_backward(self._x, self.params, grad_out, method=self.method,
                             x_nhwc=self._xh, need_input_grad=need_input_grad)
        return gx

    def parameters(self):
        return [self.params]

    def kink_state(self):
        return b""

    def astype(self, dtype):
        return Conv2d(self.params.astype(dtype), self.method)

    def __repr__(self):
        return f"Conv2d({self.params.in_channels}->{self.params.out_channels}, k={self.params.kernel_size})"


class ReLU:
    def __init__(self):
        self.mask = None

    def forward(self, x, train=True):
        out, mask = relu_forward(x)
        self.mask = mask
        return out

    def backward(self, grad_out, need_input_grad=True):
        if self.mask is None:
            raise RuntimeError("ReLU.backward called before forward")
        return relu_backward(self.mask, grad_out)

    def parameters(self):
        return []

    def kink_state(self):
        return np.packbits(self.mask).tobytes() if self.mask is not None else b""

    def astype(self, dtype):
        return ReLU()

    def __repr__(self):
        return "ReLU()"


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad_out, need_input_grad=True):
        last = len(self.layers) - 1
        for idx in range(last, -1, -1):
            need = need_input_grad or idx > 0
            grad_out = self.layers[idx].backward(grad_out, need_input_grad=need)
        return grad_out

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def kink_state(self):
        return b"".join(layer.kink_state() for layer in self.layers)

    def astype(self, dtype):
        return Sequential([layer.astype(dtype) for layer in self.layers])

    def set_method(self, method):
        for layer in self.layers:
            if isinstance(layer, Conv2d):
                layer.method = method

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __repr__(self):
        return "Sequential(" + ", ".join(map(repr, self.layers)) + ")"


def finite_difference_check(module, x, h=1e-5, samples=24, seed=0):
    """Largest relative error between analytic and central-difference gradients.

    ``module`` exposes ``forward``, ``backward``, ``parameters`` and
    ``kink_state``; it is evaluated in float64 (a converted copy is used when
    it has ``astype``). A non-scalar output is reduced with a fixed random
    projection. Up to ``samples`` coordinates of the input and of every weight
    and bias array are checked; coordinates whose perturbation flips a ReLU
    are skipped, since the derivative does not exist there.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-6, 1e-3]")
    if hasattr(module, "astype"):
        module = module.astype(np.float64)
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    for p in module.parameters():
        p.zero_grad()

    out = np.asarray(module.forward(x))
    proj = np.ones_like(out) if out.size == 1 else rng.standard_normal(out.shape)
    kinks = module.kink_state()
    gx = module.backward(proj)

    def loss():
        return float(np.sum(np.asarray(module.forward(x)) * proj))

    targets = [(x, gx)]
    for p in module.parameters():
        targets.append((p.weights, p.weight_grad.copy()))
        targets.append((p.bias, p.bias_grad.copy()))

    worst = 0.0
    for arr, grad in targets:
        if grad is None:
            continue
        flat, gflat = arr.reshape(-1), np.asarray(grad).reshape(-1)
        idx = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            plus = loss()
            moved = module.kink_state() != kinks
            flat[i] = orig - h
            minus = loss()
            moved = moved or module.kink_state() != kinks
            flat[i] = orig
            if moved:
                continue
            num = (plus - minus) / (2 * h)
            ana = float(gflat[i])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    module.forward(x)
    return worst
