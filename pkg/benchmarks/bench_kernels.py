"""Time the numpy and compiled kernel backends on the same inputs.

    python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Each kernel is run on random inputs of decoding/training size; the table
reports the best-of-N wall time per call and the speedup of the compiled
backend. Results are also checked for agreement (max abs difference).
"""
import argparse
import json
import timeit

import numpy as np

from multist.kernels import BACKENDS


def log_probs(rng, T, V):
    z = rng.normal(size=(T, V))
    return z - np.logaddexp.reduce(z, axis=1, keepdims=True)


def cases(rng):
    T, V = 200, 40
    lp = log_probs(rng, T, V)
    target = np.asarray(rng.integers(1, V, size=40), dtype=np.int64)
    r_prev = np.full((T, 2), -np.inf)
    r_prev[:, 1] = np.cumsum(lp[:, 0])
    cands = np.arange(1, V, dtype=np.int64)
    a = np.asarray(rng.integers(0, 30, size=300), dtype=np.int64)
    b = np.asarray(rng.integers(0, 30, size=300), dtype=np.int64)
    return {
        "ctc_alpha": lambda k: k.ctc_alpha(lp, target, 0),
        "ctc_beta": lambda k: k.ctc_beta(lp, target, 0),
        "ctc_loss_grad": lambda k: k.ctc_loss_grad(lp, target, 0),
        "ctc_prefix_extend": lambda k: k.ctc_prefix_extend(lp, r_prev, -1, cands, 0, True),
        "edit_distance": lambda k: k.edit_distance(a, b),
    }


def max_diff(x, y):
    if isinstance(x, tuple):
        return max(max_diff(a, b) for a, b in zip(x, y))
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    same_inf = np.isinf(x) & (x == y)
    with np.errstate(invalid="ignore"):
        d = np.where(same_inf, 0.0, np.abs(x - y))
    return float(np.max(d, initial=0.0))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args(argv)

    rows = []
    for name, fn in cases(np.random.default_rng(0)).items():
        row = {"kernel": name}
        outs = {}
        for backend, mod in BACKENDS.items():
            number = 3 if backend == "python" else 20
            t = min(timeit.repeat(lambda: fn(mod), number=number, repeat=args.repeat)) / number
            row[backend] = t
            outs[backend] = fn(mod)
        if "compiled" in outs:
            row["speedup"] = row["python"] / row["compiled"]
            row["max_abs_diff"] = max_diff(outs["python"], outs["compiled"])
        rows.append(row)

    print(f"{'kernel':<20}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}{'max diff':>12}")
    for r in rows:
        comp = f"{1e3 * r['compiled']:14.3f}" if "compiled" in r else f"{'n/a':>14}"
        sp = f"{r['speedup']:9.1f}x" if "speedup" in r else f"{'':>10}"
        diff = f"{r['max_abs_diff']:12.1e}" if "max_abs_diff" in r else ""
        print(f"{r['kernel']:<20}{1e3 * r['python']:12.3f}{comp}{sp}{diff}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
