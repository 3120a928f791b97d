"""Time the hot kernels on every importable backend.

Runs the LSTM and conv1d forward/backward pairs at a few utterance-like
shapes and prints per-call medians plus the compiled-over-python
speedup.  Invoke directly:

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from mmsent import kernels


def _median_seconds(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def lstm_case(impl, rng, steps, in_width, hidden):
    x = rng.standard_normal((steps, in_width))
    w = rng.standard_normal((4 * hidden, in_width + hidden)) * 0.1
    b = rng.standard_normal(4 * hidden) * 0.1
    h0 = np.zeros(hidden)
    c0 = np.zeros(hidden)
    d_hs = rng.standard_normal((steps, hidden))

    def run():
        hs, cs, gates = impl.lstm_forward(x, w, b, h0, c0)
        impl.lstm_backward(x, w, h0, c0, hs, cs, gates, d_hs)

    return run


def conv_case(impl, rng, steps, in_channels, kernel, out_channels):
    x = rng.standard_normal((steps, in_channels))
    w = rng.standard_normal((kernel, in_channels, out_channels)) * 0.1
    b = rng.standard_normal(out_channels) * 0.1
    pad = kernel // 2
    out_steps = steps  # same padding, stride 1
    d_y = rng.standard_normal((out_steps, out_channels))

    def run():
        impl.conv1d_forward(x, w, b, 1, pad, pad)
        impl.conv1d_backward(x, w, 1, pad, pad, d_y)

    return run


CASES = [
    ("lstm T=24 I=14 H=32", lstm_case, (24, 14, 32)),
    ("lstm T=120 I=14 H=200", lstm_case, (120, 14, 200)),
    ("lstm T=300 I=40 H=200", lstm_case, (300, 40, 200)),
    ("conv T=24 Ci=64 K=5 Co=64", conv_case, (24, 64, 5, 64)),
    ("conv T=120 Ci=64 K=5 Co=200", conv_case, (120, 64, 5, 200)),
]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=30,
                        help="timing repeats per case (median is reported)")
    args = parser.parse_args()

    backends = dict(kernels.available_backends())
    columns = sorted(backends)
    backends["dispatch"] = kernels  # the size-aware public wrappers
    columns.append("dispatch")
    print(f"active backend: {kernels.BACKEND}; "
          f"available: {', '.join(sorted(backends))}\n")
    header = f"{'case':30s}" + "".join(f"{name:>14s}" for name in columns)
    if "python" in backends and "compiled" in backends:
        header += f"{'speedup':>10s}"
    print(header)
    for label, build, shape in CASES:
        timings = {}
        for name in columns:
            rng = np.random.default_rng(1234)  # same inputs on every backend
            run = build(backends[name], rng, *shape)
            run()  # warm up
            timings[name] = _median_seconds(run, args.repeats)
        row = f"{label:30s}" + "".join(
            f"{timings[name] * 1e6:>12.1f}us" for name in columns)
        if "python" in timings and "compiled" in timings:
            row += f"{timings['python'] / timings['compiled']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
