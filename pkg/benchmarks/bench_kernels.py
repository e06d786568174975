"""Compare the compiled and pure-Python FEM kernels on the global and local grids.

    python benchmarks/bench_kernels.py [--repeat 200]
"""
import argparse
import time

import numpy as np

from ddmcmc import kernels
from ddmcmc.mesh_fem import BoundarySpec, DiffusionProblem, GaussianSource, Grid2D


def bench(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    backends = [b for b in ("cython", "python") if b in kernels.BACKENDS]
    if "cython" not in backends:
        print("compiled extension not built; only the Python backend is timed")
    rng = np.random.default_rng(0)
    grids = {"global 97x33": Grid2D((0, 3), (0, 1), 97, 33), "local 33x33": Grid2D((0, 1), (0, 1), 33, 33)}
    print(f"{'grid':<14}{'backend':<9}{'assemble ms':>13}{'dirichlet ms':>14}{'solve ms':>10}")
    for label, grid in grids.items():
        kq = rng.uniform(0.5, 1.5, (grid.n_elements, 4))
        for name in backends:
            prob = DiffusionProblem(grid, BoundarySpec(), GaussianSource(), backend=name)
            kern = kernels.get_backend(name)
            ab = kern.assemble_band(kq, prob._G, prob._conn, grid.n_nodes, prob._u)
            t_asm = bench(lambda: kern.assemble_band(kq, prob._G, prob._conn, grid.n_nodes, prob._u), args.repeat)
            t_dir = bench(lambda: kern.apply_dirichlet(ab.copy(), prob._load.copy(), prob.dirichlet_nodes,
                                                       prob.dirichlet_values), args.repeat)
            t_solve = bench(lambda: prob.solve(kq), args.repeat)
            print(f"{label:<14}{name:<9}{1e3 * t_asm:13.4f}{1e3 * t_dir:14.4f}{1e3 * t_solve:10.4f}")


if __name__ == "__main__":
    main()
