"""Compiled vs numpy kernels: per-kernel timings and one full training step.

    python3 benchmarks/bench_kernels.py [--repeat 50] [--width 64] [--batch 1024]
"""

import argparse
import time

import numpy as np

from pcmask import kernels
from pcmask.nncore import AdamState, Mode, build_network, loss_and_grad


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(batch, width, rng):
    z = rng.standard_normal((batch, width))
    bias = rng.standard_normal(width)
    grad = rng.standard_normal((batch, width))
    w = rng.standard_normal((width, width))
    p, g = rng.standard_normal(width * width), rng.standard_normal(width * width)
    m, v = np.zeros_like(p), np.zeros_like(p)
    return {
        "bias_act_forward": lambda: kernels.bias_act_forward(z.copy(), bias, 0.3),
        "leaky_relu_backward": lambda: kernels.leaky_relu_backward(grad, z, 0.3),
        "add_l1_subgradient": lambda: kernels.add_l1_subgradient(grad.copy()[:width], w, 1e-3),
        "adam_update": lambda: kernels.adam_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001),
    }


def train_step_case(batch, width, d, rng):
    net = build_network(d, (width, width), 0.3, Mode.PREMASK, seed=0, input_init="glorot")
    X = rng.standard_normal((batch, d))
    y = rng.standard_normal(batch)
    params = net.parameters()
    state = AdamState.zeros_like(params)

    def step():
        _, grads = loss_and_grad(net, X, y, 1e-3)
        state.apply(params, grads, 1e-4)

    return step


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--batch", type=int, default=1024)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--d", type=int, default=20)
    args = ap.parse_args()

    backends = kernels.available()
    if "cython" not in backends:
        print("compiled kernels not built; only the numpy fallback is timed")
    results = {}
    for name in backends:
        kernels.set_backend(name)
        rng = np.random.default_rng(0)
        cases = kernel_cases(args.batch, args.width, rng)
        cases["train_step"] = train_step_case(args.batch, args.width, args.d, rng)
        results[name] = {k: best_of(fn, args.repeat) for k, fn in cases.items()}

    print(f"batch {args.batch}, width {args.width}, d {args.d}; best of {args.repeat} (microseconds)")
    print(f"{'case':<22}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for case in results[backends[0]]:
        row = [results[b][case] * 1e6 for b in backends]
        line = f"{case:<22}" + "".join(f"{t:>12.1f}" for t in row)
        if len(row) == 2:
            line += f"{row[1] / row[0]:>11.2f}x"
        print(line)


if __name__ == "__main__":
    main()
