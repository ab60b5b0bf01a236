"""Compare the compiled and numpy point-location and P1 interpolation kernels.

Usage: python3 benchmarks/bench_kernels.py [--points N] [--repeat R]
"""

import argparse
import time

import numpy as np

from regmap import _kernels
from regmap.synthetic import rectangle_mesh


def _time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--points", type=int, default=200_000)
    ap.add_argument("--grid", type=int, default=80)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    mesh = rectangle_mesh(args.grid, args.grid)
    rng = np.random.default_rng(0)
    pts = rng.uniform(0.0, 1.0, (args.points, 2))
    k = 8
    _, cand = mesh._tree.query(pts, k=k)
    cand = np.ascontiguousarray(cand, dtype=np.int64)
    values = np.sin(3 * mesh.vertices[:, 0]) * mesh.vertices[:, 1]
    grads = np.ascontiguousarray(mesh._field_gradients(values))

    backends = {"python": _kernels.python_backend}
    if _kernels.compiled_backend is not None:
        backends["cython"] = _kernels.compiled_backend
    results = {}
    for name, b in backends.items():
        t_loc, (elem, lam, found) = _time(
            lambda b=b: b.locate_candidates(pts, mesh.origin, mesh.jac_inv, cand, 1e-10), args.repeat)
        elem = np.asarray(elem)
        lam = np.ascontiguousarray(lam)
        t_int, (vals, _) = _time(
            lambda b=b: b.p1_interpolate(elem, lam, mesh.triangles, values, grads), args.repeat)
        results[name] = (t_loc, t_int, np.asarray(elem), np.asarray(vals))
        print(f"{name:>7}: locate {t_loc * 1e3:8.2f} ms   interpolate {t_int * 1e3:8.2f} ms")
    if len(results) == 2:
        p, c = results["python"], results["cython"]
        print(f"speedup: locate {p[0] / c[0]:.1f}x   interpolate {p[1] / c[1]:.1f}x")
        print(f"agreement: elements {np.array_equal(p[2], c[2])}, max value difference {np.max(np.abs(p[3] - c[3])):.1e}")
    else:
        print("compiled backend not available")


if __name__ == "__main__":
    main()
