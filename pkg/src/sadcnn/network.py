"""Structure-aware inverse-halftoning network and the plain DCNN baseline.

The full network chains three conv/ReLU stacks:

* IRS maps the halftone to an initial continuous-tone estimate,
* ISMP maps that estimate to a predicted gradient-magnitude (structure) map,
* RS maps the channel stack (halftone, initial, structure map) to the output.

A spec with ``p == q == 0`` has no IRS/ISMP and its RS reads the halftone
alone, which is exactly the sequential baseline.
"""

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import (Conv2d, ConvParams, ReLU, Sequential, ShapeError,
                     concat_channels, mse_loss, split_channels)

STAGE_IRS_PRETRAINED = 0
STAGE_END_TO_END = 1
STAGE_NAMES = {STAGE_IRS_PRETRAINED: "irs-pretrained", STAGE_END_TO_END: "end-to-end"}

# channel order of the RS input; written to the checkpoint header
CONCAT_ORDER = ("halftone", "initial", "structure_map")
CONCAT_ORDER_ID = 0

CKPT_MAGIC = b"SADCNN01"
CKPT_VERSION = 1
_HEADER = struct.Struct("<8sI7I")
_DIMS = struct.Struct("<4I")
_TRAILER = struct.Struct("<QQ")


@dataclass(frozen=True)
class SubnetSpec:
    depth: int
    in_channels: int
    width: int = 64
    out_channels: int = 1
    kernel: int = 5

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"subnet depth must be >= 2, got {self.depth}")
        if self.kernel % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {self.kernel}")

    def channel_plan(self):
        """(in, out) channels per conv layer: c->m, m->m ..., m->out."""
        mids = [(self.width, self.width)] * (self.depth - 2)
        return [(self.in_channels, self.width), *mids, (self.width, self.out_channels)]

    @property
    def n_params(self):
        kk = self.kernel * self.kernel
        return sum(cin * cout * kk + cout for cin, cout in self.channel_plan())


@dataclass(frozen=True)
class NetworkSpec:
    p: int = 16
    q: int = 6
    r: int = 16
    m: int = 64
    k: int = 5

    def __post_init__(self):
        if (self.p == 0) != (self.q == 0):
            raise ValueError(f"p and q must both be 0 (baseline) or both >= 2, got p={self.p}, q={self.q}")
        if self.p and (self.p < 2 or self.q < 2):
            raise ValueError(f"subnet depths must be >= 2, got p={self.p}, q={self.q}")
        if self.r < 2:
            raise ValueError(f"RS depth must be >= 2, got r={self.r}")
        if self.m < 1 or self.k % 2 != 1:
            raise ValueError(f"bad width/kernel m={self.m}, k={self.k}")

    @property
    def is_baseline(self):
        return self.p == 0

    @property
    def irs(self):
        return None if self.is_baseline else SubnetSpec(self.p, 1, self.m, 1, self.k)

    @property
    def ismp(self):
        return None if self.is_baseline else SubnetSpec(self.q, 1, self.m, 1, self.k)

    @property
    def rs(self):
        return SubnetSpec(self.r, 1 if self.is_baseline else 3, self.m, 1, self.k)

    def subnet_specs(self):
        return [s for s in (self.irs, self.ismp, self.rs) if s is not None]

    @property
    def n_params(self):
        return sum(s.n_params for s in self.subnet_specs())


def build_subnet(spec, seed, dtype=np.float32, method="gemm"):
    """Conv stack per ``spec``, ReLU after every conv except the last.

    Weights are He-normal, N(0, sqrt(2 / (c k^2))); biases start at 0.
    ``seed`` is an int or a numpy Generator.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    plan = spec.channel_plan()
    for idx, (cin, cout) in enumerate(plan):
        layers.append(Conv2d(ConvParams.he_normal(cout, cin, spec.kernel, rng, dtype), method))
        if idx < len(plan) - 1:
            layers.append(ReLU())
    return Sequential(layers)


class StructureAwareNet:
    """IRS -> ISMP -> concat -> RS, or the bare RS for a baseline spec."""

    def __init__(self, spec, irs, ismp, rs):
        self.spec = spec
        self.irs = irs
        self.ismp = ismp
        self.rs = rs
        self._cache = None
        self._check_layout()

    @classmethod
    def build(cls, spec, seed=0, dtype=np.float32, method="gemm"):
        # one independent stream per subnet so IRS init does not depend on q or r
        streams = [np.random.default_rng([seed, i]) for i in range(3)]
        if spec.is_baseline:
            return cls(spec, None, None, build_subnet(spec.rs, streams[2], dtype, method))
        return cls(spec,
                   build_subnet(spec.irs, streams[0], dtype, method),
                   build_subnet(spec.ismp, streams[1], dtype, method),
                   build_subnet(spec.rs, streams[2], dtype, method))

    def _check_layout(self):
        for sub_spec, sub in zip((self.spec.irs, self.spec.ismp, self.spec.rs),
                                 (self.irs, self.ismp, self.rs)):
            if sub_spec is None:
                if sub is not None:
                    raise ShapeError("baseline spec must not carry IRS/ISMP weights")
                continue
            convs = [layer.params for layer in sub if isinstance(layer, Conv2d)]
            shapes = [p.weights.shape for p in convs]
            want = [(o, c, sub_spec.kernel, sub_spec.kernel) for c, o in sub_spec.channel_plan()]
            if shapes != want:
                raise ShapeError(f"weights {shapes} do not match spec {sub_spec} (expected {want})")

    def subnets(self):
        return [s for s in (self.irs, self.ismp, self.rs) if s is not None]

    def named_subnets(self):
        names = ("irs", "ismp", "rs")
        return [(n, s) for n, s in zip(names, (self.irs, self.ismp, self.rs)) if s is not None]

    def parameters(self):
        return [p for s in self.subnets() for p in s.parameters()]

    @property
    def n_params(self):
        return sum(p.size for p in self.parameters())

    @property
    def dtype(self):
        return self.rs.parameters()[0].weights.dtype

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def set_method(self, method):
        for s in self.subnets():
            s.set_method(method)

    def astype(self, dtype):
        conv = [None if s is None else s.astype(dtype) for s in (self.irs, self.ismp, self.rs)]
        return StructureAwareNet(self.spec, *conv)

    def copy(self):
        return self.astype(self.dtype)

    def forward(self, halftone, train=True):
        """(initial, structure_map, final); the first two are None for a baseline."""
        if halftone.ndim != 4 or halftone.shape[1] != 1:
            raise ShapeError(f"halftone input must have shape (N, 1, H, W), got {halftone.shape}")
        x = halftone.astype(self.dtype, copy=False)
        if self.spec.is_baseline:
            final = self.rs.forward(x, train)
            self._cache = True
            return None, None, final
        initial = self.irs.forward(x, train)
        smap = self.ismp.forward(initial, train)
        final = self.rs.forward(concat_channels([x, initial, smap]), train)
        self._cache = True
        return initial, smap, final

    def backward(self, grad_final, grad_smap=None, freeze_irs=False, need_input_grad=False):
        """Backpropagate the RS-output gradient and (optionally) the ISMP-output
        gradient. IRS receives contributions through both the concat and the
        ISMP. Returns the gradient wrt the halftone when ``need_input_grad``.
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        if self.spec.is_baseline:
            return self.rs.backward(grad_final, need_input_grad)
        g_cat = self.rs.backward(grad_final, need_input_grad=True)
        g_half, g_init, g_smap = split_channels(g_cat, [1, 1, 1])
        if grad_smap is not None:
            g_smap = g_smap + grad_smap
        g_init = g_init + self.ismp.backward(g_smap, need_input_grad=True)
        if freeze_irs:
            return g_half if need_input_grad else None
        g_in = self.irs.backward(g_init, need_input_grad)
        return g_half + g_in if need_input_grad else None

    def kink_state(self):
        return b"".join(s.kink_state() for s in self.subnets())

    def reconstruct(self, halftone):
        """Whole-image inference on a 2-D halftone; returns 2-D (initial, smap, final)."""
        x = np.asarray(halftone, dtype=self.dtype)[None, None]
        outs = self.forward(x, train=False)
        self._cache = None
        return tuple(None if o is None else o[0, 0].astype(np.float64) for o in outs)


def forward_full(net, halftone):
    return net.forward(halftone)


def backward_full(net, grad_final, grad_smap=None, freeze_irs=False):
    return net.backward(grad_final, grad_smap, freeze_irs)


def combined_loss(net, halftone, gray, gradient, lambda_ismp=1.0, backward=True, freeze_irs=False):
    """Forward, losses and (optionally) backward for one batch.

    Returns (rs_loss, ismp_loss, total) where
    total = MSE(final, gray) + lambda * MSE(structure_map, gradient).
    """
    _, smap, final = net.forward(halftone)
    rs_loss, g_final = mse_loss(final, gray)
    ismp_loss, g_smap = 0.0, None
    if smap is not None:
        ismp_loss, g_smap = mse_loss(smap, gradient)
        g_smap = (lambda_ismp * g_smap).astype(g_final.dtype, copy=False)
    if backward:
        net.backward(g_final, g_smap, freeze_irs)
    return rs_loss, ismp_loss, rs_loss + lambda_ismp * ismp_loss


class CombinedLossProbe:
    """Scalar-output view of the network for ``finite_difference_check``."""

    def __init__(self, net, gray, gradient, lambda_ismp=1.0):
        self.net = net
        self.gray = gray
        self.gradient = gradient
        self.lambda_ismp = lambda_ismp
        self._grads = None

    def forward(self, halftone, train=True):
        _, smap, final = self.net.forward(halftone, train)
        rs_loss, g_final = mse_loss(final, self.gray)
        total = rs_loss
        g_smap = None
        if smap is not None:
            ismp_loss, g_smap = mse_loss(smap, self.gradient)
            total += self.lambda_ismp * ismp_loss
            g_smap = self.lambda_ismp * g_smap
        self._grads = (g_final, g_smap)
        return np.array(total)

    def backward(self, grad_out, need_input_grad=True):
        scale = float(np.asarray(grad_out).reshape(-1)[0])
        g_final, g_smap = self._grads
        g_smap = None if g_smap is None else scale * g_smap
        return self.net.backward(scale * g_final, g_smap, need_input_grad=True)

    def parameters(self):
        return self.net.parameters()

    def kink_state(self):
        return self.net.kink_state()

    def astype(self, dtype):
        return CombinedLossProbe(self.net.astype(dtype), self.gray.astype(dtype),
                                 self.gradient.astype(dtype), self.lambda_ismp)


def build_baseline_dcnn(depth=17, m=64, seed=0, k=5, dtype=np.float32):
    """Sequential 1->m, (depth-2) x m->m, m->1 conv stack with ReLUs between."""
    return StructureAwareNet.build(NetworkSpec(p=0, q=0, r=depth, m=m, k=k), seed, dtype)


@dataclass
class Checkpoint:
    net: StructureAwareNet
    stage: int = STAGE_END_TO_END
    step: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def spec(self):
        return self.net.spec

    @property
    def stage_name(self):
        return STAGE_NAMES[self.stage]

    def save(self, path):
        save_checkpoint(self.net, path, self.stage, self.step, self.seed)


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(net, stage=STAGE_END_TO_END, step=0, seed=0):
    s = net.spec
    parts = [_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, s.p, s.q, s.r, s.m, s.k, stage, CONCAT_ORDER_ID)]
    for sub in net.subnets():
        for p in sub.parameters():
            parts.append(_DIMS.pack(*p.weights.shape))
            parts.append(np.ascontiguousarray(p.weights, dtype="<f4").tobytes())
            parts.append(np.ascontiguousarray(p.bias, dtype="<f4").tobytes())
    parts.append(_TRAILER.pack(step, seed))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(net, path, stage=STAGE_END_TO_END, step=0, seed=0):
    data = checkpoint_bytes(net, stage, step, seed)
    with open(path, "wb") as fh:
        fh.write(data)


def parse_checkpoint(data, spec=None, source="<bytes>"):
    def fail(msg, offset):
        raise CheckpointError(f"{source}: {msg} at offset {offset}")

    if len(data) < _HEADER.size:
        fail(f"truncated header ({len(data)} bytes)", len(data))
    magic, version, p, q, r, m, k, stage, order = _HEADER.unpack_from(data, 0)
    if magic != CKPT_MAGIC:
        fail(f"bad magic {magic!r}", 0)
    if version != CKPT_VERSION:
        fail(f"unsupported version {version}", 8)
    if stage not in STAGE_NAMES:
        fail(f"unknown stage {stage}", 32)
    if order != CONCAT_ORDER_ID:
        fail(f"unknown concat order id {order}", 36)
    try:
        found = NetworkSpec(p, q, r, m, k)
    except ValueError as exc:
        fail(f"invalid network spec ({exc})", 12)
    if spec is not None and found != spec:
        raise CheckpointError(f"{source}: checkpoint was written for {found}, expected {spec}")

    pos = _HEADER.size
    subnets = []
    for sub_spec in (found.irs, found.ismp, found.rs):
        if sub_spec is None:
            subnets.append(None)
            continue
        layers = []
        plan = sub_spec.channel_plan()
        for idx, (cin, cout) in enumerate(plan):
            if pos + _DIMS.size > len(data):
                fail("truncated layer header", pos)
            dims = _DIMS.unpack_from(data, pos)
            want = (cout, cin, k, k)
            if dims != want:
                fail(f"layer dims {dims} do not match spec {want}", pos)
            pos += _DIMS.size
            nw = cout * cin * k * k
            if pos + 4 * (nw + cout) > len(data):
                fail("truncated weights", pos)
            w = np.frombuffer(data, "<f4", nw, pos).reshape(want).astype(np.float32)
            pos += 4 * nw
            b = np.frombuffer(data, "<f4", cout, pos).astype(np.float32)
            pos += 4 * cout
            layers.append(Conv2d(ConvParams(w, b)))
            if idx < len(plan) - 1:
                layers.append(ReLU())
        subnets.append(Sequential(layers))
    if pos + _TRAILER.size + 4 > len(data):
        fail("truncated trailer", pos)
    step, seed = _TRAILER.unpack_from(data, pos)
    pos += _TRAILER.size
    (crc,) = struct.unpack_from("<I", data, pos)
    if crc != zlib.crc32(data[:pos]):
        fail("CRC32 mismatch", pos)
    if pos + 4 != len(data):
        fail(f"{len(data) - pos - 4} trailing bytes", pos + 4)
    return Checkpoint(StructureAwareNet(found, *subnets), stage, step, seed)


def load_checkpoint(path, spec=None):
    """Read a checkpoint; ``spec`` (optional) must match the stored one."""
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_checkpoint(data, spec, source=str(path))


GRADCHECK_TOL = 1e-4


def gradient_checks(full=False, h=1e-5, seed=0):
    """Finite-difference checks of every layer type (and, with ``full``, the
    whole IRS -> ISMP -> concat -> RS graph on a tiny spec), all in float64.

    Returns a list of (name, max relative error).
    """
    from .tensor import finite_difference_check

    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2, 6, 6))
    conv = Conv2d(ConvParams.he_normal(3, 2, 5, rng, np.float64))
    conv.params.bias[:] = rng.normal(size=3)
    stack = build_subnet(SubnetSpec(3, 2, 4, 1, 5), rng, np.float64)
    results = [
        ("conv2d", finite_difference_check(conv, x, h, seed=seed)),
        ("conv2d-direct", finite_difference_check(Conv2d(conv.params, "direct"), x, h, seed=seed)),
        ("relu", finite_difference_check(ReLU(), x + np.sign(x) * 1e-3, h, seed=seed)),
        ("conv-relu-stack", finite_difference_check(stack, x, h, seed=seed)),
        ("mse", _mse_check(rng, h)),
    ]
    if full:
        net = StructureAwareNet.build(NetworkSpec(2, 2, 2, 4), seed, np.float64)
        halftone = (rng.random((2, 1, 8, 8)) < 0.5).astype(np.float64)
        probe = CombinedLossProbe(net, rng.random((2, 1, 8, 8)), rng.random((2, 1, 8, 8)), 1.0)
        results.append(("full-network", finite_difference_check(probe, halftone, h, samples=32, seed=seed)))
    return results


def _mse_check(rng, h):
    pred, target = rng.normal(size=(2, 1, 4, 4)), rng.normal(size=(2, 1, 4, 4))
    _, grad = mse_loss(pred, target)
    worst = 0.0
    for i in range(pred.size):
        plus, minus = pred.copy(), pred.copy()
        plus.flat[i] += h
        minus.flat[i] -= h
        num = (mse_loss(plus, target)[0] - mse_loss(minus, target)[0]) / (2 * h)
        worst = max(worst, abs(num - grad.flat[i]) / max(abs(num), abs(grad.flat[i]), 1e-8))
    return worst
