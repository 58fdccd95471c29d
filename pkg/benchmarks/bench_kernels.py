"""Times the compiled tabular kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both backends are imported directly, so the PLANVAL_PURE_PYTHON switch does
not matter here. Outputs are compared before timing.
"""
import argparse
import time

import numpy as np

from planval import _kernels_py as py_k
from planval.envs import random_mdp

try:
    from planval import _kernels as c_k
except ImportError:
    c_k = None

CASES = [(3, 2, 2), (4, 3, 3), (6, 4, 3), (6, 4, 4)]   # (states, actions, k)


def _inputs(n_s, n_a, seed=0):
    mdp = random_mdp(seed, n_s, n_a)
    pi = np.random.default_rng(seed).dirichlet(np.ones(n_a), size=n_s)
    P, R = np.ascontiguousarray(mdp.transition), np.ascontiguousarray(mdp.reward)
    v = np.random.default_rng(seed + 1).normal(size=n_s)
    return P, R, pi, np.log(pi), mdp.gamma, v


def _best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if c_k is None:
        print("compiled extension not built; timing the numpy fallback only")
    print(f"{'kernel':<22}{'S,A,k':>10}{'numpy ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for n_s, n_a, k in CASES:
        P, R, pi, logpi, gamma, v = _inputs(n_s, n_a)
        jobs = {
            "plan_path_stats": lambda m: m.plan_path_stats(P, R, pi, logpi, gamma, k),
            "deterministic_search": lambda m: m.deterministic_search(P, R, v, gamma, k, False, 1e-12),
        }
        for name, job in jobs.items():
            t_py = _best_of(lambda: job(py_k), args.repeat)
            if c_k is None:
                print(f"{name:<22}{f'{n_s},{n_a},{k}':>10}{1e3 * t_py:>12.3f}")
                continue
            a, b = job(py_k), job(c_k)
            for x, y in zip(a, b):
                np.testing.assert_allclose(x, y, rtol=1e-10, atol=1e-12)
            t_c = _best_of(lambda: job(c_k), args.repeat)
            print(f"{name:<22}{f'{n_s},{n_a},{k}':>10}{1e3 * t_py:>12.3f}{1e3 * t_c:>14.3f}"
                  f"{t_py / t_c:>9.1f}x")


if __name__ == "__main__":
    main()
