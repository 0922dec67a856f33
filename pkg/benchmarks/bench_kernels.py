"""Benchmark the numba geometry kernels against the pure-numpy fallback.

Runs each kernel over a grid of molecule sizes, reports per-call timings
for both backends, and checks that they agree numerically.

    python benchmarks/bench_kernels.py [--repeats 200]
"""

import argparse
import time

import numpy as np

from chiralnet.kernels import numpy_backend

try:
    from chiralnet.kernels import numba_backend
except ImportError:
    numba_backend = None


def make_case(n_atoms: int, rng: np.random.Generator):
    positions = rng.normal(scale=3.0, size=(n_atoms, 3))

    def distinct(k, width):
        rows = rng.integers(0, n_atoms, size=(4 * k, width))
        rows = rows[np.array([len(set(r)) == width for r in rows])][:k]
        return rows.astype(np.int64)

    return {
        "positions": positions,
        "pairs": distinct(2 * n_atoms, 2),
        "triples": distinct(3 * n_atoms, 3),
        "quads": distinct(3 * n_atoms, 4),
        "indices": np.arange(n_atoms // 2, dtype=np.int64),
        "axis": np.array([0.0, 0.0, 1.0]),
        "origin": np.zeros(3),
    }


def run_kernel(backend, name, case, angle=1.1):
    if name == "bond_distances":
        return backend.bond_distances(case["positions"], case["pairs"])
    if name == "bend_angles":
        return backend.bend_angles(case["positions"], case["triples"])
    if name == "dihedral_angles":
        return backend.dihedral_angles(case["positions"], case["quads"])
    if name == "rotate_about_axis":
        return backend.rotate_about_axis(
            case["positions"], case["indices"], case["origin"], case["axis"], angle
        )
    return backend.reflect_through_plane(case["positions"], case["axis"])


KERNELS = (
    "bond_distances", "bend_angles", "dihedral_angles",
    "rotate_about_axis", "reflect_through_plane",
)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=200)
    parser.add_argument("--sizes", type=int, nargs="+", default=[16, 64, 512, 4096])
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    backends = [("numpy", numpy_backend)]
    if numba_backend is not None:
        backends.append(("numba", numba_backend))
    else:
        print("numba unavailable: benchmarking the numpy backend only")

    header = f"{'kernel':<22}{'n_atoms':>8}" + "".join(
        f"{name + ' us/call':>16}" for name, _ in backends
    ) + ("   speedup" if len(backends) == 2 else "") + "   max|diff|"
    print(header)
    print("-" * len(header))

    for n_atoms in args.sizes:
        case = make_case(n_atoms, rng)
        for kernel in KERNELS:
            row = f"{kernel:<22}{n_atoms:>8}"
            times = []
            outputs = []
            for _, backend in backends:
                run_kernel(backend, kernel, case)  # warm up / JIT
                start = time.perf_counter()
                for _ in range(args.repeats):
                    out = run_kernel(backend, kernel, case)
                times.append((time.perf_counter() - start) / args.repeats * 1e6)
                outputs.append(np.nan_to_num(out))
                row += f"{times[-1]:>16.2f}"
            if len(backends) == 2:
                row += f"{times[0] / times[1]:>10.2f}x"
                diff = float(np.abs(outputs[0] - outputs[1]).max())
                row += f"{diff:>12.2e}"
            else:
                row += f"{0.0:>12.2e}"
            print(row)


if __name__ == "__main__":
    main()
