#!/usr/bin/env python3
"""Watch the normalized partial sums converge to their stable limit.

For the scalar benchmark (tail index 1, symmetric driver) this prints the
sup distance between the empirical characteristic function of
n^(-1) S_n and the fitted limit exp(s C(v)) along a doubling ladder of n,
plus the two-sample Kolmogorov distance between consecutive levels.
"""
import sys

import numpy as np

import kestenlab as kl
from kestenlab.rng import substream
from kestenlab.stable_limit import classify_regime


def main() -> int:
    replicas = int(sys.argv[1]) if len(sys.argv) > 1 else 8000
    env = kl.Environment(dim=1, matrix_law=kl.ScalarTwoPoint((2.0, 0.5), (1 / 3, 2 / 3)),
                         vector_law=kl.ConstantVector((1.0,)), q_symmetric=True,
                         kappa0_hint=1.5)
    grid = kl.build_grid(1, 2)
    sol = kl.solve_kappa(env, grid, (0.2, 3.0), 20_000, substream(1, 1))
    batch = kl.sample_stationary(env, kl.SeriesConfig(tolerance=1e-9, seed=2), 500_000)
    regime = classify_regime(sol.kappa)
    kappa = kl.stable_limit.effective_kappa(sol.kappa, regime)
    sigma = kl.estimate_sigma(batch, float(np.quantile(batch.norms(), 0.99)),
                              grid, kappa, True)
    cent = kl.centering(env, sol.kappa, batch, regime=regime)
    dirs = np.array([[1.0], [-1.0]])
    law = kl.compute_stable_law(env, sol.kappa, sigma, dirs, 4000, substream(1, 3),
                                regime=regime, cent=cent)
    print(f"kappa = {sol.kappa:.4f}, C(+1) = {law.c_values[0]:.4f}, "
          f"budget = {law.error_budget:.4f}\n")
    s_values = np.linspace(0.1, 2.0, 16)
    previous = None
    for exp in (10, 11, 12, 13, 14):
        n = 2 ** exp
        sums = kl.birkhoff_sums(env, kl.PathConfig(n_steps=n, start_x=(0.0,),
                                                   replicas=replicas, seed=100 + exp))
        ecf = kl.empirical_cf(sums, (n, law.kappa, cent), (s_values, dirs))
        fit = kl.stable_fit_check(ecf, law)
        line = f"n = 2^{exp:<3d} sup |ecf - cf| = {fit.sup_deviation:.4f}"
        if previous is not None:
            ks = kl.stable_limit.self_similarity_check(previous, sums, law.kappa,
                                                       cent, dirs)
            line += f"   KS vs previous = {ks.max_ks:.4f}"
        print(line)
        previous = sums
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
