"""Compare the compiled row kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--rows 2048] [--cols 64] [--repeat 50]

Also times one full bridge training step (batch 32) under each backend,
which is what the kernels are for.  Backends are swapped by re-binding the
kernel functions, so both runs share one process.
"""

import argparse
import time

import numpy as np

from descedit.numcore import kernels


def best_of(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(mod, rows, cols, dtype):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((rows, cols)).astype(dtype)
    g = rng.standard_normal((rows, cols)).astype(dtype)
    gain = np.ones(cols, dtype=dtype)
    bias = np.zeros(cols, dtype=dtype)
    y = mod.softmax_forward(x)
    _, xhat, rstd = mod.layer_norm_forward(x, gain, bias, 1e-5)
    return {
        "softmax fwd": lambda: mod.softmax_forward(x),
        "softmax bwd": lambda: mod.softmax_backward(y, g),
        "layernorm fwd": lambda: mod.layer_norm_forward(x, gain, bias, 1e-5),
        "layernorm bwd": lambda: mod.layer_norm_backward(g, xhat, rstd, gain),
    }


def use_backend(mod):
    # ops looks the kernels up on the module at call time
    for name in ("softmax_forward", "softmax_backward", "layer_norm_forward", "layer_norm_backward"):
        setattr(kernels, name, getattr(mod, name))


def training_step_time(repeat):
    from descedit import dataset as D
    from descedit.diffusion import AdamWState, NoiseSchedule, TrainConfig, training_step
    from descedit.model import Model, ModelConfig
    from descedit.rng import stream

    model = Model.init(ModelConfig(), 0)
    pairs = D.gen_dataset(0, 32)
    cfg, sched, state = TrainConfig(batch_size=32), NoiseSchedule(), AdamWState()
    return best_of(lambda: training_step(model, pairs, sched, cfg, stream(0, 99), state), repeat)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=2048)
    ap.add_argument("--cols", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--steps", type=int, default=5, help="repeats for the training-step timing")
    args = ap.parse_args()

    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the numpy fallback is available")
    for dtype in (np.float32, np.float64):
        print(f"\n[{args.rows} x {args.cols}] {np.dtype(dtype).name}, best of {args.repeat} (ms)")
        print(f"{'kernel':<15}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
        times = {b: {k: best_of(fn, args.repeat) for k, fn in kernel_cases(m, args.rows, args.cols, dtype).items()}
                 for b, m in backends.items()}
        for k in times["python"]:
            row = f"{k:<15}" + "".join(f"{times[b][k] * 1e3:>12.3f}" for b in backends)
            if "compiled" in times:
                row += f"{times['python'][k] / times['compiled'][k]:>9.1f}x"
            print(row)

    print(f"\nbridge training step, batch 32, best of {args.steps} (ms)")
    for b, mod in backends.items():
        use_backend(mod)
        print(f"{b:<15}{training_step_time(args.steps) * 1e3:>12.1f}")


if __name__ == "__main__":
    main()
