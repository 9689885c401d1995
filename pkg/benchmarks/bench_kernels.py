"""Time the compiled and numpy kernel backends on representative inputs.

    python benchmarks/bench_kernels.py [--repeat 5] [--threads 1]
"""
import argparse
import os
import sys
import timeit

import numpy as np

from facegeom import kernels
from facegeom.mesh import icosphere, subdivide_midpoint, vertex_normals


def cases(rng):
    mesh = subdivide_midpoint(icosphere(5, 50.0), 1)
    normals = vertex_normals(mesh)
    mu = rng.normal(size=mesh.vertex_count)
    indptr, indices = mesh.adjacency
    yield (f"detail_displacement ({mesh.vertex_count} vertices)",
           lambda b: kernels.detail_displacement(mesh.vertices, normals, mu, indptr, indices, b))

    src = rng.normal(size=(3000, 3)) * 40
    dst = src + rng.normal(size=src.shape)
    models = np.tile(np.hstack([np.eye(3), np.zeros((3, 1))]), (1000, 1, 1))
    models += rng.normal(0, 0.01, models.shape)
    yield ("affine_consensus (1000 models x 3000 pairs)",
           lambda b: kernels.affine_consensus(src, dst, models, 3.0, b))

    gt = rng.random(65536)
    est = 2 * gt + 5 + rng.normal(0, 0.01, gt.size)
    lines = np.column_stack([2 + rng.normal(0, 0.05, 1000), 5 + rng.normal(0, 0.05, 1000)])
    yield ("line_consensus (1000 models x 65536 pixels)",
           lambda b: kernels.line_consensus(est, gt, lines, 0.03, b))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args(argv)
    os.environ["FACEGEOM_THREADS"] = str(args.threads)
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; timing the numpy backend only", file=sys.stderr)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<46}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for name, fn in cases(rng):
        times = {}
        for b in backends:
            fn(b)
            times[b] = min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat))
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{name:<46}" + "".join(f"{times[b] * 1e3:>10.2f}ms" for b in backends)
              + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()
