"""Time the compiled and numpy kernel backends, then a full training step on each.

    python benchmarks/bench_kernels.py --rows 4096 --width 64 --repeat 50
"""

import argparse
import time

import numpy as np

from timexer import kernels
from timexer.data import WindowSet
from timexer.model import TimeXerConfig, init_params
from timexer.training import AdamState, train_step


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        tic = time.perf_counter()
        fn()
        times.append(time.perf_counter() - tic)
    return min(times)


def kernel_cases(rows, width, rng):
    x = rng.normal(size=(rows, width))
    g = rng.normal(size=(rows, width))
    gamma, beta = rng.normal(size=width), rng.normal(size=width)
    y = kernels.python_backend.softmax_forward(x)
    _, xhat, rstd = kernels.python_backend.layer_norm_forward(x, gamma, beta, 1e-5)
    return {
        "softmax_forward": lambda b: b.softmax_forward(x),
        "softmax_backward": lambda b: b.softmax_backward(y, g),
        "layer_norm_forward": lambda b: b.layer_norm_forward(x, gamma, beta, 1e-5),
        "layer_norm_backward": lambda b: b.layer_norm_backward(g, xhat, rstd, gamma),
        "gelu_forward": lambda b: b.gelu_forward(x),
        "gelu_backward": lambda b: b.gelu_backward(x, g),
    }


def train_step_time(repeat, rng):
    c = TimeXerConfig(lookback=96, horizon=24, patch=16, model_dim=32, heads=4, ffn_dim=64, batch_size=32)
    batch = WindowSet(rng.normal(size=(32, 96)), rng.normal(size=(32, 3, 96)), rng.normal(size=(32, 24)),
                      np.arange(32))
    params, state = init_params(c), AdamState(lr=c.lr)
    return best_of(lambda: train_step(params, c, batch, state), repeat)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=4096)
    parser.add_argument("--width", type=int, default=64)
    parser.add_argument("--repeat", type=int, default=50)
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)

    backends = {"python": kernels.python_backend}
    if kernels.compiled_backend is not None:
        backends["compiled"] = kernels.compiled_backend
    else:
        print("compiled backend unavailable; timing the numpy backend only")

    print(f"{'kernel':22s}" + "".join(f"{name:>12s}" for name in backends) + f"{'speedup':>10s}")
    for name, case in kernel_cases(args.rows, args.width, rng).items():
        times = {b: best_of(lambda: case(mod), args.repeat) for b, mod in backends.items()}
        speedup = times["python"] / times["compiled"] if "compiled" in times else float("nan")
        print(f"{name:22s}" + "".join(f"{t * 1e3:10.3f}ms" for t in times.values()) + f"{speedup:9.2f}x")

    step = {}
    for name in backends:
        previous = kernels.use_backend(name)
        step[name] = train_step_time(max(args.repeat // 10, 3), rng)
        kernels.use_backend(previous)
    speedup = step["python"] / step["compiled"] if "compiled" in step else float("nan")
    print(f"{'train_step':22s}" + "".join(f"{t * 1e3:10.3f}ms" for t in step.values()) + f"{speedup:9.2f}x")


if __name__ == "__main__":
    main()
