"""Time the numba and pure-numpy variants of every hot kernel.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel is warmed up once (numba compiles on first call), then timed as
the best of ``--repeat`` runs. Results of both variants are compared before
timing so a speed number is never reported for a wrong answer.
"""

import argparse
import time

import numpy as np

from fapt import kernels


def best_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    p, nt, tn, n, m = 37, 16, 16, 20, 10
    synth = (rng.standard_normal(p) + 1j * rng.standard_normal(p),
             rng.standard_normal((p, nt)) + 1j * rng.standard_normal((p, nt)),
             rng.uniform(-np.pi, np.pi, p), rng.uniform(-np.pi, np.pi, p),
             rng.uniform(-5e3, 5e3, p), np.arange(tn) * 1e-3, n, m)
    x = rng.standard_normal((64, 8, 20, 10))
    w = rng.standard_normal((8, 8, 3, 3))
    y = kernels.conv2d_forward_numpy(x, w, 2, 1)
    dy = rng.standard_normal(y.shape)
    pred = rng.standard_normal((200, 8, 16, n, m)) + 1j * rng.standard_normal((200, 8, 16, n, m))
    ref = rng.standard_normal(pred.shape) + 1j * rng.standard_normal(pred.shape)
    return [
        ("synth_tables", kernels.synth_tables_numpy, kernels.synth_tables_numba, synth),
        ("conv2d_forward", kernels.conv2d_forward_numpy, kernels.conv2d_forward_numba, (x, w, 2, 1)),
        ("conv2d_backward", kernels.conv2d_backward_numpy, kernels.conv2d_backward_numba,
         (x, w, dy, 2, 1)),
        ("port_argmin", kernels.port_argmin_numpy, kernels.port_argmin_numba, (pred, ref)),
    ]


def same(a, b):
    if isinstance(a, tuple):
        return all(same(u, v) for u, v in zip(a, b))
    if np.issubdtype(np.asarray(a).dtype, np.integer):
        return np.array_equal(a, b)
    return np.allclose(a, b, rtol=1e-10, atol=1e-10)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<16} {'numpy ms':>10} {'numba ms':>10} {'speed-up':>9}")
    for name, np_fn, nb_fn, inputs in cases(rng):
        if not same(np_fn(*inputs), nb_fn(*inputs)):
            raise SystemExit(f"{name}: numba and numpy results disagree")
        t_np = best_time(lambda: np_fn(*inputs), args.repeat)
        t_nb = best_time(lambda: nb_fn(*inputs), args.repeat)
        print(f"{name:<16} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:8.2f}x")


if __name__ == "__main__":
    main()
