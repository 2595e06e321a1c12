"""Compare the compiled and numpy Sinkhorn backends on batched label-space problems.

    python benchmarks/bench_sinkhorn.py [--batch 512] [--repeat 5]

Both backends solve identical batches; the script reports the best wall time
of each, the speed-up and the largest potential disagreement.
"""
import argparse
import time

import numpy as np

from knot import _kernels
from knot.label_space import builtin_space
from knot.prob import clamp_rows


def best_time(fn, repeat):
    best, out = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=512)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if _kernels.compiled_solve_batch is None:
        raise SystemExit("compiled backend not built; run `python setup.py build_ext --inplace`")

    rng = np.random.default_rng(args.seed)
    print(f"{'task':5} {'eps':>7} {'batch':>6} {'cython s':>9} {'numpy s':>9} {'speed-up':>8} {'max |df|':>9}")
    for task in ("SA", "ERC", "NLI"):
        sp = builtin_space(task)
        L = sp.n_labels
        mu = clamp_rows(rng.dirichlet(np.ones(L), size=args.batch))
        nu = clamp_rows(rng.dirichlet(np.ones(L), size=args.batch))
        for eps in (1e-3, 1e-2, 1e-1):
            call = (mu, nu, sp.cost, eps, 5000, 1e-9)
            tc, (fc, gc, _, _) = best_time(lambda: _kernels.compiled_solve_batch(*call), args.repeat)
            tp, (fp, gp, _, _) = best_time(lambda: _kernels.python_solve_batch(*call), args.repeat)
            diff = max(np.abs(fc - fp).max(), np.abs(gc - gp).max())
            print(f"{task:5} {eps:7.0e} {args.batch:6d} {tc:9.4f} {tp:9.4f} {tp / tc:7.1f}x {diff:9.1e}")


if __name__ == "__main__":
    main()
