"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--repeat N]

Prints per-call times for the Jacobi eigensolver (dimension 8 and 16) and
the Fano evaluator (100k points), and the max disagreement between backends.
"""
import argparse
import timeit

import numpy as np

from wgmesr.kernels import backends


def _hermitian(n, rng):
    a = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    return (a + a.conj().T) / 2


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    mats = {n: _hermitian(n, rng) for n in (8, 16)}
    f = np.linspace(-5e4, 5e4, 100_000) + 14.934048e9
    impls = backends()
    print(f"backends available: {', '.join(impls)}")
    ref = {}
    for name, mod in impls.items():
        for n, a in mats.items():
            t = min(timeit.repeat(lambda: mod.jacobi_eigh(a), number=1, repeat=args.repeat))
            w = np.sort(mod.jacobi_eigh(a)[0])
            ref.setdefault(("eig", n), w)
            err = np.max(np.abs(w - ref[("eig", n)]))
            print(f"{name:>8s} jacobi_eigh n={n:<3d} {t * 1e6:10.1f} us   max|dw| vs first = {err:.1e}")
        t = min(timeit.repeat(lambda: mod.fano_eval(f, 14.934048e9, 2298.0, 0.3, -0.5, 1.0), number=1, repeat=max(args.repeat // 10, 3)))
        y = mod.fano_eval(f, 14.934048e9, 2298.0, 0.3, -0.5, 1.0)
        ref.setdefault("fano", y)
        print(f"{name:>8s} fano_eval 1e5 pts {t * 1e6:10.1f} us   max|dy| vs first = {np.max(np.abs(y - ref['fano'])):.1e}")


if __name__ == "__main__":
    main()
