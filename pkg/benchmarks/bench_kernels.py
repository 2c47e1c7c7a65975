"""Time the compiled and pure-Python kernel backends on tracker-sized inputs.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from stalab import kernels


def cases(rng):
    x = rng.standard_normal((8, 31, 31))
    w = rng.standard_normal((16, 8, 3, 3))
    gout = rng.standard_normal((16, 29, 29))
    src = rng.uniform(size=(3, 128, 128))
    ys = rng.uniform(-4, 132, size=9 * 64 * 64)
    xs = rng.uniform(-4, 132, size=9 * 64 * 64)
    fill = src.mean(axis=(1, 2))
    g = rng.standard_normal((3, ys.size))
    return {
        "conv2d_forward 8x31x31 * 16x8x3x3": lambda m: m.conv2d_forward(x, w, 1),
        "conv2d_backward": lambda m: m.conv2d_backward(x, w, gout, 1),
        "bilinear_forward 3x128x128 @ 36864": lambda m: m.bilinear_forward(src, ys, xs, fill),
        "bilinear_backward": lambda m: m.bilinear_backward(g, ys, xs, 128, 128, True),
    }


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    impls = kernels.implementations()
    print(f"selected backend: {kernels.BACKEND}; available: {', '.join(impls)}")
    names = list(impls)
    print(f"{'kernel':38s}" + "".join(f"{n + ' ms':>14s}" for n in names) + ("   speedup" if len(names) > 1 else ""))
    for label, fn in cases(np.random.default_rng(0)).items():
        times = []
        for n in names:
            t = timeit.Timer(lambda: fn(impls[n]))
            number, _ = t.autorange()
            times.append(min(t.repeat(args.repeat, number)) / number * 1e3)
        line = f"{label:38s}" + "".join(f"{v:14.3f}" for v in times)
        if len(times) > 1:
            line += f"{times[0] / times[1]:9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
