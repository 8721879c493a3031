"""Time the compiled and numpy kernels on the same work.

Usage: python benchmarks/bench_kernels.py [--rows 1600] [--rounds 100] [--repeat 3]

Fits the boosted-tree meta model and computes tree SHAP for every row with
each available backend, checks that both produce the same model, and prints
the best-of-``repeat`` wall time for each.
"""

import argparse
import time

import numpy as np

from mfmc import _kernels, io
from mfmc.explain import shap_values
from mfmc.gbt import GbtParams, gbt_fit
from mfmc.synth import SynthConfig, generate


def best_time(fn, repeat):
    times, out = [], None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rows", type=int, default=1600)
    p.add_argument("--rounds", type=int, default=100)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--shap-rows", type=int, default=200)
    args = p.parse_args(argv)

    t, _ = generate(SynthConfig(seed=0, n_sites=4, subjects_per_site=args.rows // 4, effect=0.7))
    rng = np.random.default_rng(0)
    # two extra probability-like columns, as the stack's meta input has
    x = np.hstack([t.values, rng.random((t.n_subjects, 2))])
    y = t.y
    params = GbtParams(max_depth=args.depth, rounds=args.rounds)
    backends = _kernels.available_backends()
    print(f"{x.shape[0]} rows x {x.shape[1]} columns, depth {args.depth}, {args.rounds} rounds; "
          f"backends: {', '.join(backends)} (default {_kernels.BACKEND})")

    docs, rows = {}, []
    for name, k in backends.items():
        fit_s, model = best_time(lambda: gbt_fit(x, y, params, kernels=k), args.repeat)
        docs[name] = io.dumps(model.to_dict())
        shap_s, _ = best_time(lambda: shap_values(model, x[:args.shap_rows], kernels=k), args.repeat)
        rows.append((name, fit_s, shap_s))

    print(f"{'backend':<8} {'gbt_fit (s)':>12} {'tree_shap (s)':>14}")
    for name, fit_s, shap_s in rows:
        print(f"{name:<8} {fit_s:>12.3f} {shap_s:>14.3f}")
    if len(rows) == 2:
        by = {name: (f, sh) for name, f, sh in rows}
        (pf, ps), (cf, cs) = by["python"], by["cython"]
        print(f"python / cython time: fit x{pf / cf:.1f}, shap x{ps / cs:.1f}")
        print("identical models:", len(set(docs.values())) == 1)


if __name__ == "__main__":
    main()
