"""Time the convolution kernels and one training step under both backends.

    python benchmarks/bench_kernels.py [--batch 256] [--repeat 5]

The backend is read from LLR_NUMBA on every call, so both are timed in one
process.  Results from the two backends are also compared elementwise.
"""

import argparse
import os
import time

import numpy as np

from llr import models, training
from llr.autodiff import kernels

SHAPES = [
    # (C_in, H, O, k, stride, pad)
    (3, 32, 16, 3, 2, 1),
    (16, 16, 32, 3, 2, 1),
    (16, 32, 16, 3, 1, 1),
]


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def with_backend(name, fn):
    prev = os.environ.get("LLR_NUMBA")
    os.environ["LLR_NUMBA"] = "1" if name == "numba" else "0"
    try:
        return fn()
    finally:
        if prev is None:
            del os.environ["LLR_NUMBA"]
        else:
            os.environ["LLR_NUMBA"] = prev


def bench_kernels(batch, repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<14}{'shape':<28}{'numpy s':>10}{'numba s':>10}{'speedup':>9}{'max diff':>11}")
    for c, h, o, k, s, p in SHAPES:
        x = rng.standard_normal((batch, c, h, h))
        w = rng.standard_normal((o, c, k, k))
        y = kernels.conv2d_numpy(x, w, s, p)
        g = rng.standard_normal(y.shape)
        cases = {
            "forward": lambda: kernels.conv2d(x, w, s, p),
            "input_grad": lambda: kernels.conv2d_input_grad(g, w, x.shape, s, p),
            "weight_grad": lambda: kernels.conv2d_weight_grad(x, g, w.shape, s, p),
        }
        for name, fn in cases.items():
            t_np = with_backend("numpy", lambda: best_of(fn, repeat))
            t_nb = with_backend("numba", lambda: best_of(fn, repeat))
            diff = np.max(np.abs(with_backend("numpy", fn) - with_backend("numba", fn)))
            label = f"{c}x{h}x{h}->{o} k{k} s{s} p{p}"
            print(f"{name:<14}{label:<28}{t_np:>10.4f}{t_nb:>10.4f}{t_np / t_nb:>9.2f}{diff:>11.1e}")


def bench_steps(batch, repeat):
    rng = np.random.default_rng(1)
    spec = models.small_cnn(2)
    x = rng.uniform(0, 1, (batch,) + spec.input_shape)
    t = rng.integers(0, 2, batch)
    params = models.init_params(spec, 0)
    print(f"\n{'train step':<42}{'numpy s':>10}{'numba s':>10}{'speedup':>9}")
    for mode, kw in (("erm", {}), ("adv", {"pgd_steps": 1}), ("llr", {"inner_steps": 2})):
        cfg = training.TrainConfig(mode=mode, epochs=1, ramp_epochs=0, batch_size=batch, **kw)

        def step():
            state = training.TrainState.fresh(params.copy())
            training.train_step(state, spec, x, t, cfg, 0.1, 8 / 255)

        t_np = with_backend("numpy", lambda: best_of(step, repeat))
        t_nb = with_backend("numba", lambda: best_of(step, repeat))
        label = f"{mode} {kw}" if kw else mode
        print(f"{label:<42}{t_np:>10.4f}{t_nb:>10.4f}{t_np / t_nb:>9.2f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"numba available: {kernels.HAVE_NUMBA}")
    bench_kernels(args.batch, args.repeat)
    bench_steps(args.batch, max(1, args.repeat // 2))


if __name__ == "__main__":
    main()
