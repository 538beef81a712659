"""Time the numba kernels against the numpy fallback.

Usage: python benchmarks/bench_backends.py [--sizes 1024,4096] [--repeats 3] [--json out.json]

Each operation is run once per backend before timing so compilation is
excluded. The table lists the best of ``--repeats`` runs in milliseconds.
"""

import argparse
import json
import time

import numpy as np

from diffconv import _backend
from diffconv.grouping import DilationField, KdTree, ball_query, kernel_density, knn_query
from diffconv.network import DiffConvNet, NetworkConfig


def best_of(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(n, rng):
    pts = rng.uniform(-1, 1, (n, 3))
    field = DilationField.from_cloud(pts, 0.1, 0.0125)
    tree = KdTree(pts)
    r = (0.01 * 8 * 3 / (4 * np.pi)) ** (1 / 3)
    sphere = rng.normal(size=(1024, 3))
    sphere /= np.linalg.norm(sphere, axis=1, keepdims=True)
    model = DiffConvNet(NetworkConfig(input_points=1024, num_classes=40))
    return {
        "kernel_density": lambda: kernel_density(pts, 0.1),
        "ball_brute": lambda: ball_query(pts, pts, r),
        "ball_kdtree": lambda: tree.ball(pts, r),
        "dilated_ball": lambda: ball_query(pts, pts, sq_radius=field.sq_radius),
        "knn_brute": lambda: knn_query(pts, pts, 16),
        "knn_kdtree": lambda: tree.knn(pts, 16),
        "forward_1024": lambda: model.forward([sphere]),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="1024,4096")
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    results = []
    for n in (int(s) for s in args.sizes.split(",")):
        timings = {}
        for backend in _backend.BACKENDS:
            with _backend.use_backend(backend):
                for op, fn in cases(n, np.random.default_rng(0)).items():
                    timings.setdefault(op, {})[backend] = best_of(fn, args.repeats)
        print(f"\nN = {n}")
        print(f"{'operation':16s} {'numba ms':>10s} {'numpy ms':>10s} {'speed-up':>9s}")
        for op, t in timings.items():
            print(f"{op:16s} {t['numba'] * 1e3:10.2f} {t['numpy'] * 1e3:10.2f} "
                  f"{t['numpy'] / t['numba']:8.1f}x")
            results.append({"n": n, "operation": op, **{f"{k}_s": v for k, v in t.items()}})
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
