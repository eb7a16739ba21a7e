"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5] [--size 64 96]

Both backends are imported side by side (``*_nb`` / ``*_np``), so one
process compares them regardless of ``KBNET_DISABLE_NUMBA``.  The first
numba call compiles; it is timed separately and excluded from the table.
Every pair is also checked for identical output before timing.
"""

import argparse
import time

import numpy as np

from kbnet.numerics import kernels


def _cases(h, w, rng):
    z = np.where(rng.random((4, 1, h, w)) < 0.02, rng.uniform(0.5, 10.0, (4, 1, h, w)), 0.0)
    image = rng.random((4, 3, h, w))
    u = rng.uniform(-2, w + 1, (4, h, w))
    v = rng.uniform(-2, h + 1, (4, h, w))
    grad = rng.standard_normal((4, 3, h, w))
    k, stride, pad = 3, 1, 1
    cols = rng.standard_normal((4, 8, k, k, h, w))
    _, idx = kernels.masked_min_pool_np(z, 15)
    pgrad = rng.standard_normal(z.shape)
    return {
        "masked_min_pool k=15": (lambda m: m.masked_min_pool_np, lambda m: m.masked_min_pool_nb, (z, 15)),
        "max_pool k=27": (lambda m: m.max_pool_np, lambda m: m.max_pool_nb, (z, 27)),
        "pool_backward": (lambda m: m.pool_backward_np, lambda m: m.pool_backward_nb, (pgrad, idx, h, w)),
        "bilinear_forward": (lambda m: m.bilinear_forward_np, lambda m: m.bilinear_forward_nb, (image, u, v)),
        "bilinear_backward": (lambda m: m.bilinear_backward_np, lambda m: m.bilinear_backward_nb,
                              (grad, image, u, v)),
        "col2im 3x3": (lambda m: m.col2im_np, lambda m: m.col2im_nb, (cols, (4, 8, h, w), k, stride, pad)),
    }


def _best(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=0, atol=1e-12)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, nargs=2, default=(64, 96), metavar=("H", "W"))
    args = ap.parse_args(argv)
    if kernels.numba is None:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':24s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'compile s':>10s}")
    for name, (get_np, get_nb, call_args) in _cases(*args.size, rng).items():
        f_np, f_nb = get_np(kernels), get_nb(kernels)
        t0 = time.perf_counter()
        out_nb = f_nb(*call_args)
        compile_s = time.perf_counter() - t0
        if not _same(f_np(*call_args), out_nb):
            raise SystemExit(f"{name}: numba and numpy outputs differ")
        t_np = _best(f_np, call_args, args.repeat)
        t_nb = _best(f_nb, call_args, args.repeat)
        print(f"{name:24s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.1f} {compile_s:10.2f}")


if __name__ == "__main__":
    main()
