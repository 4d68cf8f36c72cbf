"""Time the numpy and numba kernel backends on desk-scale shapes.

    python benchmarks/bench_kernels.py [--repeat 20] [--step]

Each kernel is warmed up once (numba compiles on first call), checked for
agreement between backends, then timed; ``--step`` also times one full
supernet weight step per backend.
"""
import argparse
import time

import numpy as np

from nasunet.autodiff import kernels


def cases(rng):
    x = rng.standard_normal((4, 16, 32, 32)).astype(np.float32)
    w = rng.standard_normal((32, 16, 3, 3)).astype(np.float32)
    wd = rng.standard_normal((16, 1, 3, 3)).astype(np.float32)
    y = rng.standard_normal((4, 32, 32, 32)).astype(np.float32)
    yd = rng.standard_normal((4, 16, 32, 32)).astype(np.float32)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    xp2 = np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)))
    return {
        "conv 3x3 16->32": lambda k: k.conv_forward(xp, w, 1, 1, 1, 32, 32),
        "conv 3x3 d2": lambda k: k.conv_forward(xp2, w, 1, 2, 1, 32, 32),
        "depthwise 3x3": lambda k: k.conv_forward(xp, wd, 1, 1, 16, 32, 32),
        "conv grad input": lambda k: k.conv_backward_input(y, w, xp.shape, 1, 1, 1),
        "conv grad weight": lambda k: k.conv_backward_weight(xp, y, w.shape, 1, 1, 1),
        "depthwise grad weight": lambda k: k.conv_backward_weight(xp, yd, wd.shape, 1, 1, 16),
        "maxpool 2x2": lambda k: k.maxpool_forward(x),
        "group norm": lambda k: k.group_norm_forward(x, 4, 1e-5),
    }


def timed(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def first(out):
    return out[0] if isinstance(out, tuple) else out


def bench_kernels(repeat):
    backends = kernels.available_backends()
    table = {}
    for name, fn in cases(np.random.default_rng(0)).items():
        outs = {}
        for b in backends:
            kernels.use_backend(b)
            outs[b] = first(fn(kernels))  # warm-up / compile
            table.setdefault(name, {})[b] = timed(lambda: fn(kernels), repeat)
        if len(outs) == 2:
            np.testing.assert_allclose(outs["numba"], outs["numpy"], rtol=1e-4, atol=1e-4)
    return backends, table


def bench_step(repeat):
    from nasunet.optim import SGD
    from nasunet.rng import stream
    from nasunet.search import weight_step
    from nasunet.supernet import NetworkConfig, Supernet

    cfg = NetworkConfig(depth=3, base_channels=8, num_classes=4, m=3, input_size=(64, 64))
    rng = np.random.default_rng(0)
    images = rng.standard_normal((4, 1, 64, 64)).astype(np.float32)
    labels = rng.integers(0, 4, (4, 64, 64))
    out = {}
    for b in kernels.available_backends():
        kernels.use_backend(b)
        net = Supernet(cfg, seed=0)
        opt = SGD(net.parameters(), 0.025, 0.95, 3e-4)
        weight_step(net, images, labels, opt, stream(0, "bench"))
        out[b] = timed(lambda: weight_step(net, images, labels, opt, stream(0, "bench")), max(1, repeat // 5))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--step", action="store_true", help="also time a full supernet weight step")
    args = ap.parse_args()
    prev = kernels.backend
    backends, table = bench_kernels(args.repeat)
    print(f"{'kernel':24s}" + "".join(f"{b + ' ms':>12s}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name, row in table.items():
        line = f"{name:24s}" + "".join(f"{1e3 * row[b]:12.3f}" for b in backends)
        if len(backends) == 2:
            line += f"{row['numpy'] / row['numba']:11.1f}x"
        print(line)
    if args.step:
        step = bench_step(args.repeat)
        print("supernet weight step    " + "".join(f"{1e3 * step[b]:12.1f}" for b in backends))
    kernels.use_backend(prev)


if __name__ == "__main__":
    main()
