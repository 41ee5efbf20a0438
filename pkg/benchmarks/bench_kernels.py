"""Compare the compiled and numpy im2col/col2im kernels.

Usage: ``python benchmarks/bench_kernels.py [--sizes 16,32,48] [--channels 16] [--repeat 5]``
"""
import argparse
import json
import time

import numpy as np

from tokenunet import _kernels_py

try:
    from tokenunet import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _median_ms(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t) * 1e3)
    return float(np.median(times))


def bench(sizes, channels, repeat, stride, dtype):
    backends = {"numpy": _kernels_py}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    rows = []
    rng = np.random.default_rng(0)
    for n in sizes:
        x = rng.standard_normal((channels, n, n, n)).astype(dtype)
        cols = _kernels_py.im2col3d(x, stride)
        for name, mod in backends.items():
            if not np.array_equal(mod.im2col3d(x, stride), cols):
                raise AssertionError(f"{name} im2col3d disagrees with the numpy kernel")
            rows.append({
                "backend": name, "size": n, "channels": channels, "stride": stride,
                "im2col_ms": _median_ms(lambda: mod.im2col3d(x, stride), repeat),
                "col2im_ms": _median_ms(lambda: mod.col2im3d(cols, x.shape, stride), repeat),
            })
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", default="16,32,48")
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--stride", type=int, choices=(1, 2), default=1)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--json", metavar="PATH")
    args = p.parse_args(argv)
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = bench(sizes, args.channels, args.repeat, args.stride, np.dtype(args.dtype))
    print(f"{'backend':<8}{'size':>6}{'im2col ms':>12}{'col2im ms':>12}")
    for r in rows:
        print(f"{r['backend']:<8}{r['size']:>6}{r['im2col_ms']:>12.2f}{r['col2im_ms']:>12.2f}")
    if _ckernels is None:
        print("compiled extension not built; only the numpy kernels were timed")
    else:
        for n in sizes:
            by = {r["backend"]: r for r in rows if r["size"] == n}
            print(f"size {n}: im2col speedup {by['numpy']['im2col_ms'] / by['cython']['im2col_ms']:.2f}x, "
                  f"col2im speedup {by['numpy']['col2im_ms'] / by['cython']['col2im_ms']:.2f}x")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
