"""Two-cycle HMM: the path-local dual filter and its attention-like weights.

State d branches into a long or a short cycle; only states 1 and d emit a
1.  After a 1 the filter cannot tell the branches apart until the next
symbol, so the optimal predictor only needs to look at the time steps that
follow a 1.  The dual filter's weights show exactly that.
"""
import numpy as np

from dualfilter.dual_hmm import dual_filter_path, heatmap, path_predictor, query_weights_path
from dualfilter.experiments import event_columns
from dualfilter.hmm import cross_entropy, entropy_benchmark, forward_filter, simulate_hmm, two_cycle

d, q, T = 16, 4, 64
hmm = two_cycle(d, q)
_, z = simulate_hmm(hmm, T, seed=0)
z = z[:T]
print("observations:", "".join(map(str, z)))

# iterate layers from the uniform guess
state = dual_filter_path(hmm, z)
pi = forward_filter(hmm, z).pi
print(f"converged after {state.iteration} layers; max |rho - pi| = {np.abs(state.rho - pi).max():.1e}")

H = heatmap(query_weights_path(hmm, state.rho, z))
ev = event_columns(z)
print(f"weight outside event columns: {H[:, ~ev].sum():.1e}; inside: {H[:, ev].sum():.2f}")

s = 54
row = H[s - 1, :s]
print(f"query step {s}, nonzero weights at t =", [int(t) + 1 for t in np.flatnonzero(row > 1e-12)])

# a coarse text heatmap ('#' strong, '+' weak, '.' zero) of the last 24 query steps
for r in range(T - 24, T):
    print(f"{r + 1:3d} " + "".join("#" if v > 0.3 else "+" if v > 1e-9 else "." for v in H[r, : r + 1]))

_, paths = simulate_hmm(hmm, T, seed=1, n_paths=20)
print(f"cross-entropy: dual {cross_entropy(hmm, path_predictor(hmm), T, paths=paths):.4f}  "
      f"optimal {entropy_benchmark(hmm, T, paths=paths):.4f}  asymptotic {np.log(2) / 10.5:.4f}")
