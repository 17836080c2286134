"""Compare the compiled and numpy expression kernels.

Usage::

    python benchmarks/bench_kernels.py [--pixels 65536] [--repeat 5]

For each expression and each operation (evaluate, vjp, jacobian) the best
wall time over ``--repeat`` runs is reported per backend, together with the
speedup and the maximum relative difference between backends.
"""

import argparse
import sys
import timeit

import numpy as np

from satformula import kernels
from satformula.evaluate import compile_expr, eval_pixels, jacobian_pixels, vjp_pixels
from satformula.expr import constants, parse

EXPRESSIONS = {
    "ndvi": "(B4 - B3) / (B4 + B3)",
    "h": "((B2 - B1) + 0.76) * 76.58",
    "evi": "2.5 * ((B4 - B3) / (((B4 + (6.0 * B3)) - (7.5 * B1)) + 1.0))",
    "agb": "(B3 * 14493.77) + (42412.93 - (-1171.04 / ((B4 + 0.54) + (B3 * (B4 - 0.93)))))",
    "nested": "log(exp(B1 * 0.5) + (B2 / (B3 + 0.1))) - exp(log(B4 + 1.0) * 0.3)",
}


def run(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def flat(result):
    """Arrays of one kernel result; ``jacobian`` returns (values, jac)."""
    return [np.asarray(r) for r in (result if isinstance(result, tuple) else (result,))]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pixels", type=int, default=64 * 64 * 16)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if "native" not in kernels.BACKENDS:
        print("compiled kernels not built; only the numpy backend is available", file=sys.stderr)
        return 1
    rng = np.random.default_rng(args.seed)
    X = np.ascontiguousarray(rng.uniform(0.01, 1.0, size=(4, args.pixels)))
    w = rng.normal(size=args.pixels)

    print(f"{args.pixels} pixels, best of {args.repeat}")
    print(f"{'expression':<10} {'op':<9} {'native ms':>10} {'python ms':>10} {'speedup':>8} {'rel diff':>9}")
    for name, text in EXPRESSIONS.items():
        e = parse(text)
        prog = compile_expr(e)
        c = np.asarray(constants(e), dtype=np.float64)
        ops = {
            "evaluate": lambda b: eval_pixels(prog, X, c, backend=b),
            "vjp": lambda b: vjp_pixels(prog, X, c, w, backend=b),
            "jacobian": lambda b: jacobian_pixels(prog, X, c, backend=b),
        }
        for op, fn in ops.items():
            if op != "evaluate" and prog.n_consts == 0:
                continue
            out = {b: fn(b) for b in ("native", "python")}
            diff = max(float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))
                       for a, b in zip(flat(out["native"]), flat(out["python"])))
            t = {b: run(lambda: fn(b), args.repeat) * 1e3 for b in ("native", "python")}
            print(f"{name:<10} {op:<9} {t['native']:>10.3f} {t['python']:>10.3f} "
                  f"{t['python'] / t['native']:>7.1f}x {diff:>9.1e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
