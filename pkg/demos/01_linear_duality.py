"""Linear Gaussian model: the dual filter is the Kalman filter, reached without recursion.

For any control sequence u the dual cost J equals half the mean squared error
of the estimator built from u.  Minimising J gives the weights of the
optimal linear predictor of f'X_T, and the result matches the augmented
Kalman filter.
"""
import numpy as np

from dualfilter.lgssm import (dual_cost, dual_filter_solve, kalman_augmented, mse_exact, predict_linear,
                              random_model, simulate)

rng = np.random.default_rng(0)
model = random_model(rng, d=3, m=2, T=20, tau=2, scale=0.8, obs_gain=0.3, noise=2.0)
f = np.array([1.0, -0.5, 0.25])

# duality holds for an arbitrary control
u = rng.standard_normal((model.T, model.m))
print(f"2J = {2 * dual_cost(model, u, f):.6f}   MSE = {mse_exact(model, u, f):.6f}")

# the optimal control, by damped layer iteration and by one sparse solve
fixed = dual_filter_solve(model, f, method="fixed_point", tol=1e-12)
direct = dual_filter_solve(model, f, method="direct")
print(f"layers used: {fixed.iterations}, max |u_fp - u_direct| = {np.abs(fixed.u - direct.u).max():.1e}")

z = simulate(model, seed=1).z[: model.T]
pred = predict_linear(model, direct, z)
ref = kalman_augmented(model, z, f)
print(f"dual filter : mean {pred.mean:+.6f}  variance {pred.variance:.6f}")
print(f"Kalman      : mean {ref.mean:+.6f}  variance {ref.variance:.6f}")

# the weight on each observation; the most recent ones count most
print("|u_t| by t:", " ".join(f"{v:.1e}" for v in np.linalg.norm(direct.u, axis=1)))
