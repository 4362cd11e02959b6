"""What happens when the dual filter runs on the wrong model.

Two studies on the two-cycle HMM: fitting models of the wrong size with
Baum-Welch, and perturbing the true transition or emission matrix.
Perturbing transitions spreads the weights over non-event time steps;
perturbing emissions keeps them concentrated after each 1.
"""
import numpy as np

from dualfilter.dual_hmm import dual_filter_path, heatmap, path_predictor, query_weights_path
from dualfilter.experiments import weight_pattern
from dualfilter.hmm import baum_welch, cross_entropy, entropy_benchmark, perturb, simulate_hmm, two_cycle

d, q, T = 8, 2, 48
truth = two_cycle(d, q)
_, train = simulate_hmm(truth, T, seed=0, n_paths=150)
_, evals = simulate_hmm(truth, T, seed=1, n_paths=30)
print(f"optimal loss {entropy_benchmark(truth, T, paths=evals):.4f}")
for d_hat in (4, 8):
    fit = baum_welch(train, d_hat, truth.m, iters=150, seed=2, restarts=8)
    loss = cross_entropy(truth, path_predictor(fit.hmm), T, paths=evals)
    print(f"d_hat = {d_hat}: log-likelihood {fit.loglik[-1]:.1f}, dual-filter loss {loss:.4f}")

_, z = simulate_hmm(truth, T, seed=5)
z = z[:T]
for target in ("transition", "emission"):
    for eps in (0.01, 0.1, 0.2):
        hmm = perturb(truth, eps, target)
        state = dual_filter_path(hmm, z)
        pat = weight_pattern(heatmap(query_weights_path(hmm, state.rho, z)), z)
        enr = pat["event_enrichment"]
        print(f"{target:10s} eps={eps:<4}: off-event weight {pat['off_event_fraction']:.2f}, "
              f"event enrichment {'inf' if enr is None else f'{enr:.2f}'}")
