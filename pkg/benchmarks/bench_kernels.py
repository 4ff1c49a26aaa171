"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--quick]

Prints one row per kernel with the median time of each backend and the
speedup. Also times a full training step of the desk-profile network on the
default backend.
"""

import argparse
import statistics
import time

import numpy as np

from sadcnn import kernels


def median_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def kernel_cases(quick):
    rng = np.random.default_rng(0)
    side = 128 if quick else 256
    gray = rng.random((side, side))
    x_nhwc = rng.random((8, 32, 32, 16)).astype(np.float32)
    n = 1 if quick else 2
    x = rng.normal(size=(n, 8, 32, 32))
    w = rng.normal(size=(8, 8, 5, 5))
    b = rng.normal(size=8)
    g = rng.normal(size=(n, 8, 32, 32))
    return [
        (f"error_diffuse_fs {side}x{side}", lambda k: k.error_diffuse_fs(gray.copy(), False)),
        ("im2col 8x32x32x16 k5", lambda k: k.im2col(x_nhwc, 5, 2, 0, 32)),
        (f"direct conv fwd {n}x8x32x32 -> 8", lambda k: k.conv2d_direct_forward(x, w, b, 2, 1)),
        (f"direct conv bwd {n}x8x32x32 -> 8", lambda k: k.conv2d_direct_backward(x, w, g, 2, 1)),
    ]


def train_step_time(repeat):
    from sadcnn.network import NetworkSpec, StructureAwareNet, combined_loss
    from sadcnn.tensor import sgd_step

    rng = np.random.default_rng(0)
    net = StructureAwareNet.build(NetworkSpec(3, 3, 3, 16))
    shape = (8, 1, 32, 32)
    half = (rng.random(shape) < 0.5).astype(np.float32)
    gray, grad = rng.random(shape).astype(np.float32), rng.random(shape).astype(np.float32)

    def step():
        combined_loss(net, half, gray, grad)
        sgd_step(net.parameters(), 1e-4, 0.9)

    return median_time(step, repeat)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--quick", action="store_true", help="smaller inputs")
    args = parser.parse_args(argv)

    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)} (default: {kernels.BACKEND})")
    header = f"{'kernel':<36}" + "".join(f"{b:>12}" for b in backends)
    if "cython" in backends:
        header += f"{'speedup':>10}"
    print(header)
    for name, fn in kernel_cases(args.quick):
        times = {b: median_time(lambda: fn(kernels.get_backend(b)), args.repeat) for b in backends}
        row = f"{name:<36}" + "".join(f"{times[b] * 1e3:>10.2f}ms" for b in backends)
        if "cython" in times:
            row += f"{times['python'] / times['cython']:>9.1f}x"
        print(row)
    print(f"desk-profile training step (batch 8): {train_step_time(args.repeat) * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
