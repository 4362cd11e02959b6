"""Linear Gaussian model of order tau and its dual (optimal control) filter.

The model is::

    X_{t+1} = sum_{s=1}^{min(tau, t+1)} A_{t+1,s} X_{t+1-s} + B_{t+1},   X_0 ~ N(mu0, Sigma0)
    Z_{t+1} = C X_t + W_{t+1}

with B ~ N(0, Q), W ~ N(0, R).  Note the offset: Z_{t+1} measures X_t.

The estimate of f'X_T given Z_{1:T} is written as an affine function of the
observations, ``mu0'y_0 - sum_t u_{t-1}'Z_t``, whose weights ``u`` minimise a
quadratic control cost.  :func:`dual_filter_solve` computes them either by
iterating the backward/forward layer map or by a direct sparse solve.
:func:`kalman_augmented` and :func:`mse_exact` are independent references.
"""
import time
import tracemalloc
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._numerics import ModelError, check_psd, loglog_slope, psd_sqrt

OPTIMALITY_TOL = 1e-8


class NonConvergenceError(RuntimeError):
    """The layer iteration did not reach the requested tolerance."""

    def __init__(self, message, residual, iterations, solution=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        self.solution = solution


@dataclass(frozen=True, eq=False)
class LinearGaussianModel:
    """Parameters of the order-``tau`` linear Gaussian model.

    ``A`` is either ``(tau, d, d)`` with ``A[s-1]`` the lag-``s`` matrix
    (time invariant), or ``(T, tau, d, d)`` with ``A[t-1, s-1] = A_{t,s}``.
    """

    A: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    mu0: np.ndarray
    Sigma0: np.ndarray
    T: int

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if A.ndim == 2:
            A = A[None]
        if A.ndim not in (3, 4) or A.shape[-1] != A.shape[-2]:
            raise ModelError(f"A must have shape (tau, d, d) or (T, tau, d, d), got {A.shape}")
        d = A.shape[-1]
        T = int(self.T)
        if T < 1:
            raise ModelError("horizon T must be >= 1")
        if A.ndim == 4 and A.shape[0] < T:
            raise ModelError(f"time-varying A needs {T} time slices, got {A.shape[0]}")
        tau = A.shape[-3]
        if not 1 <= tau:
            raise ModelError("model order tau must be >= 1")
        if C.shape[1] != d:
            raise ModelError(f"C must be m x {d}, got {C.shape}")
        m = C.shape[0]
        Q = check_psd(np.atleast_2d(self.Q), "Q")
        R = check_psd(np.atleast_2d(self.R), "R", strict=True)
        Sigma0 = check_psd(np.atleast_2d(self.Sigma0), "Sigma0")
        mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=float))
        if Q.shape != (d, d) or Sigma0.shape != (d, d) or mu0.shape != (d,):
            raise ModelError("Q, Sigma0 must be d x d and mu0 a d-vector")
        if R.shape != (m, m):
            raise ModelError(f"R must be {m} x {m}, got {R.shape}")
        for name, val in dict(A=A, C=C, Q=Q, R=R, mu0=mu0, Sigma0=Sigma0, T=T).items():
            object.__setattr__(self, name, val)

    @property
    def d(self):
        return self.A.shape[-1]

    @property
    def m(self):
        return self.C.shape[0]

    @property
    def tau(self):
        return min(self.A.shape[-3], self.T)

    @property
    def time_varying(self):
        return self.A.ndim == 4

    def trans(self, t, s):
        """Transition matrix ``A_{t,s}`` (1 <= s <= min(tau, t))."""
        if self.time_varying:
            return self.A[t - 1, s - 1]
        return self.A[s - 1]

    @cached_property
    def _bstack(self):
        # [A_1' A_2' ... A_tau'], multiplies (y_{t+1}, ..., y_{t+tau})
        return np.ascontiguousarray(np.hstack([self.A[s].T for s in range(self.tau)]))

    @cached_property
    def _fstack(self):
        # [A_tau ... A_1], multiplies (eta_{t-tau}, ..., eta_{t-1})
        return np.ascontiguousarray(np.hstack([self.A[s] for s in reversed(range(self.tau))]))

    def backward_lags(self, t, k):
        """``[A_{t+1,1}' ... A_{t+k,k}']`` as a d x kd block row."""
        if not self.time_varying:
            return self._bstack[:, : k * self.d]
        return np.hstack([self.A[t + s - 1, s - 1].T for s in range(1, k + 1)])

    def forward_lags(self, t, k):
        """``[A_{t,k} ... A_{t,1}]`` as a d x kd block row."""
        if not self.time_varying:
            return self._fstack[:, (self.tau - k) * self.d:]
        return np.hstack([self.A[t - 1, s - 1] for s in range(k, 0, -1)])

    @cached_property
    def _R_cho(self):
        return la.cho_factor(self.R)


@dataclass
class LinearTrajectory:
    x: np.ndarray  # (T+1, d): X_0..X_T
    z: np.ndarray  # (T+1, m): Z_1..Z_{T+1}
    seed: int | None = None


@dataclass
class DualSolution:
    f: np.ndarray
    u: np.ndarray  # (T, m): u_0..u_{T-1}
    y: np.ndarray  # (T+1, d): y_0..y_T
    eta: np.ndarray  # (T, d): eta_0..eta_{T-1}
    residual: float
    method: str
    iterations: int = 0
    history: list = field(default_factory=list)

    @property
    def optimal(self):
        scale = max(1.0, float(np.abs(self.u).max(initial=0.0)))
        return self.residual <= OPTIMALITY_TOL * scale


@dataclass
class GaussianPrediction:
    mean: float
    variance: float
    weights: np.ndarray | None = None  # (T, m): coefficient of Z_1..Z_T in the mean


def simulate(model, seed=None):
    """Sample X_0..X_T and Z_1..Z_{T+1}.

    The initial condition, process noise and observation noise come from
    three independent child streams of ``seed``.
    """
    ss = np.random.SeedSequence(seed)
    g0, gb, gw = (np.random.default_rng(s) for s in ss.spawn(3))
    d, m, T = model.d, model.m, model.T
    L0, LQ, LR = psd_sqrt(model.Sigma0), psd_sqrt(model.Q), psd_sqrt(model.R)
    x = np.empty((T + 1, d))
    x[0] = model.mu0 + L0 @ g0.standard_normal(d)
    B = gb.standard_normal((T, d)) @ LQ.T
    for t in range(T):
        k = min(model.tau, t + 1)
        x[t + 1] = model.forward_lags(t + 1, k) @ x[t + 1 - k: t + 1].ravel() + B[t]
    z = x @ model.C.T + gw.standard_normal((T + 1, m)) @ LR.T
    return LinearTrajectory(x=x, z=z, seed=seed)


def prior_moments(model):
    """Unconditional means and marginal covariances of X_0..X_T."""
    d, T = model.d, model.T
    mean = np.empty((T + 1, d))
    mean[0] = model.mu0
    # joint covariance of the whole history, needed when tau > 1
    P = np.zeros(((T + 1) * d, (T + 1) * d))
    P[:d, :d] = model.Sigma0
    for t in range(T):
        k = min(model.tau, t + 1)
        F = model.forward_lags(t + 1, k)
        lo, hi, new = (t + 1 - k) * d, (t + 1) * d, slice((t + 1) * d, (t + 2) * d)
        mean[t + 1] = F @ mean[t + 1 - k: t + 1].ravel()
        cross = F @ P[lo:hi, :hi]
        P[new, :hi] = cross
        P[:hi, new] = cross.T
        P[new, new] = cross[:, lo:hi] @ F.T + model.Q
    covs = np.stack([P[t * d:(t + 1) * d, t * d:(t + 1) * d] for t in range(T + 1)])
    return mean, covs


def kalman_augmented(model, z, f, weights=True):
    """Posterior mean and variance of f'X_T given Z_{1:T} by recursive filtering.

    The filter state stacks the last ``min(tau, t+1)`` states; for ``tau = T``
    it is the entire history, which is what makes this route O(T^3).  Each
    step corrects X_t with Z_{t+1} and then predicts X_{t+1}.
    """
    z = np.asarray(z, dtype=float).reshape(-1, model.m)
    d, m, T = model.d, model.m, model.T
    if z.shape[0] != T:
        raise ValueError(f"expected {T} observations, got {z.shape[0]}")
    f = np.asarray(f, dtype=float)
    cap = min(model.tau, T) + 1
    mean = np.zeros(cap * d)
    P = np.zeros((cap * d, cap * d))
    W = np.zeros((cap * d, T * m)) if weights else None
    mean[:d] = model.mu0
    P[:d, :d] = model.Sigma0
    k = 1  # states currently held, oldest first; newest is the last block
    C, R = model.C, model.R
    for t in range(T):
        n = k * d
        cur = slice(n - d, n)
        # correct X_t with Z_{t+1}
        PH = P[:n, cur] @ C.T
        S = C @ PH[cur] + R
        if not np.all(np.isfinite(S)):
            raise FloatingPointError("innovation covariance is not finite")
        try:
            K = la.solve(S, PH.T, assume_a="pos").T
        except la.LinAlgError as exc:
            raise FloatingPointError("singular innovation covariance") from exc
        mean[:n] += K @ (z[t] - C @ mean[cur])
        P[:n, :n] -= K @ PH.T
        if W is not None:
            innov = -C @ W[cur]
            innov[:, t * m:(t + 1) * m] += np.eye(m)
            W[:n] += K @ innov
        # predict X_{t+1}
        kk = min(model.tau, t + 1)
        F = model.forward_lags(t + 1, kk)
        lo = n - kk * d
        new_mean = F @ mean[lo:n]
        cross = F @ P[lo:n, :n]
        new_var = cross[:, lo:n] @ F.T + model.Q
        new_w = F @ W[lo:n] if W is not None else None
        if k == cap:  # window full: drop the oldest state
            mean[: n - d] = mean[d:n]
            P[: n - d, : n - d] = P[d:n, d:n]
            cross = cross[:, d:]
            if W is not None:
                W[: n - d] = W[d:n]
            k -= 1
            n -= d
        new = slice(n, n + d)
        mean[new] = new_mean
        P[new, :n] = cross
        P[:n, new] = cross.T
        P[new, new] = 0.5 * (new_var + new_var.T)
        if W is not None:
            W[new] = new_w
        k += 1
    last = slice((k - 1) * d, k * d)
    w = None if W is None else (f @ W[last]).reshape(T, m)
    return GaussianPrediction(mean=float(f @ mean[last]), variance=float(f @ P[last, last] @ f), weights=w)


def dual_backward(model, u, f):
    """Backward dual system: y_T = f, y_t = sum_s A_{t+s,s}' y_{t+s} + C' u_t."""
    u = np.asarray(u, dtype=float).reshape(-1, model.m)
    if u.shape[0] != model.T:
        raise ValueError(f"u must have {model.T} rows, got {u.shape[0]}")
    T, d = model.T, model.d
    y = np.empty((T + 1, d))
    y[T] = f
    Cu = u @ model.C
    for t in range(T - 1, -1, -1):
        k = min(model.tau, T - t)
        y[t] = model.backward_lags(t, k) @ y[t + 1: t + 1 + k].ravel() + Cu[t]
    return y


def dual_forward(model, y):
    """Forward momentum: eta_0 = Sigma0 y_0, eta_t = sum_s A_{t,s} eta_{t-s} + Q y_t."""
    y = np.asarray(y, dtype=float)
    T = model.T
    if y.shape != (T + 1, model.d):
        raise ValueError(f"y must have shape {(T + 1, model.d)}, got {y.shape}")
    eta = np.empty((T, model.d))
    eta[0] = model.Sigma0 @ y[0]
    Qy = y @ model.Q.T
    for t in range(1, T):
        k = min(model.tau, t)
        eta[t] = model.forward_lags(t, k) @ eta[t - k: t].ravel() + Qy[t]
    return eta


def control_from_momentum(model, eta):
    """u_t = -R^{-1} C eta_t."""
    return -la.cho_solve(model._R_cho, model.C @ np.asarray(eta).T).T


def linear_layer(model, eta, f):
    """One layer eta -> eta+: control from eta, backward pass, forward pass."""
    u = control_from_momentum(model, eta)
    return dual_forward(model, dual_backward(model, u, f))


def dual_cost(model, u, f):
    """J_T(u; f) = 1/2 |y_0|^2_Sigma0 + 1/2 sum_t (|y_{t+1}|^2_Q + |u_t|^2_R)."""
    u = np.asarray(u, dtype=float).reshape(-1, model.m)
    y = dual_backward(model, u, f)
    quad = y[0] @ model.Sigma0 @ y[0]
    quad += np.einsum("ti,ij,tj->", y[1:], model.Q, y[1:])
    quad += np.einsum("ti,ij,tj->", u, model.R, u)
    return 0.5 * float(quad)


def mse_exact(model, u, f):
    """E|f'X_T - S_T|^2 for S_T = mu0'y_0 - sum_t u_{t-1}'Z_t, from joint moments.

    Every X_t and Z_{t+1} is written as a mean plus a linear map of the
    primitive noises (X_0 - mu0, B_1..B_T, W_1..W_T); the joint mean and
    covariance of (X_T, Z_1..Z_T) follow, and the MSE is a quadratic form in
    them.  Independent of the dual system except for the constant mu0'y_0.
    """
    u = np.asarray(u, dtype=float).reshape(-1, model.m)
    f = np.asarray(f, dtype=float)
    d, m, T = model.d, model.m, model.T
    n_noise = d + T * d + T * m
    noise_cov = np.zeros((n_noise, n_noise))
    noise_cov[:d, :d] = model.Sigma0
    for t in range(T):
        b = d + t * d
        noise_cov[b:b + d, b:b + d] = model.Q
        w = d + T * d + t * m
        noise_cov[w:w + m, w:w + m] = model.R
    mean = np.zeros((T + 1, d))
    load = np.zeros((T + 1, d, n_noise))
    mean[0] = model.mu0
    load[0, :, :d] = np.eye(d)
    for t in range(T):
        acc_m = np.zeros(d)
        acc_l = np.zeros((d, n_noise))
        for s in range(1, min(model.tau, t + 1) + 1):
            A = model.trans(t + 1, s)
            acc_m += A @ mean[t + 1 - s]
            acc_l += A @ load[t + 1 - s]
        acc_l[:, d + t * d: d + (t + 1) * d] += np.eye(d)
        mean[t + 1], load[t + 1] = acc_m, acc_l
    # joint vector J = (X_T, Z_1, ..., Z_T)
    jm = np.concatenate([mean[T]] + [model.C @ mean[t] for t in range(T)])
    jl = [load[T]]
    for t in range(T):
        lz = model.C @ load[t]
        w = d + T * d + t * m
        lz[:, w:w + m] += np.eye(m)
        jl.append(lz)
    jl = np.vstack(jl)
    jcov = jl @ noise_cov @ jl.T
    y0 = dual_backward(model, u, f)[0]
    # error = f'X_T + sum u_{t-1}'Z_t - mu0'y_0
    wvec = np.concatenate([f, u.ravel()])
    bias = wvec @ jm - model.mu0 @ y0
    return float(bias ** 2 + wvec @ jcov @ wvec)


def _residual(model, u, eta):
    return float(np.abs(u - control_from_momentum(model, eta)).max(initial=0.0))


def _direct(model, f):
    d, m, T = model.d, model.m, model.T
    ny = T * d
    n = 2 * T * d + T * m
    iy = lambda t: t * d  # noqa: E731
    ie = lambda t: ny + t * d  # noqa: E731
    iu = lambda t: 2 * ny + t * m  # noqa: E731
    rows, cols, vals = [], [], []

    def put(r0, c0, block):
        block = np.atleast_2d(block)
        rr, cc = np.nonzero(block)
        rows.append(rr + r0)
        cols.append(cc + c0)
        vals.append(block[rr, cc])

    rhs = np.zeros(n)
    I_d = np.eye(d)
    for t in range(T):
        # y_t - sum A' y_{t+s} - C' u_t = [A_{T,T-t}' f]
        put(iy(t), iy(t), I_d)
        for s in range(1, min(model.tau, T - t) + 1):
            At = model.trans(t + s, s).T
            if t + s == T:
                rhs[iy(t):iy(t) + d] += At @ f
            else:
                put(iy(t), iy(t + s), -At)
        put(iy(t), iu(t), -model.C.T)
        # eta_t - sum A eta_{t-s} - Q y_t = 0  (eta_0 = Sigma0 y_0)
        put(ie(t), ie(t), I_d)
        for s in range(1, min(model.tau, t) + 1):
            put(ie(t), ie(t - s), -model.trans(t, s))
        put(ie(t), iy(t), -(model.Sigma0 if t == 0 else model.Q))
        # stationarity: C eta_t + R u_t = 0
        put(iu(t), ie(t), model.C)
        put(iu(t), iu(t), model.R)
    K = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    sol = spla.spsolve(K, rhs)
    return sol[2 * ny:].reshape(T, m)


def dual_filter_solve(model, f, method="fixed_point", tol=1e-10, max_iter=10_000, damping=0.5):
    """Optimal weights u for the estimate of f'X_T.

    ``fixed_point`` starts from u = 0 and repeats the layer map (backward
    pass, forward pass, damped control update ``u <- (1-g) u + g(-R^{-1} C eta)``)
    until the largest change in u drops below ``tol``.  ``direct`` solves the
    stationarity conditions together with both passes as one sparse system.
    """
    f = np.asarray(f, dtype=float)
    if f.shape != (model.d,):
        raise ValueError(f"f must be a {model.d}-vector")
    if method == "direct":
        u = _direct(model, f)
        y = dual_backward(model, u, f)
        eta = dual_forward(model, y)
        return DualSolution(f, u, y, eta, _residual(model, u, eta), "direct")
    if method != "fixed_point":
        raise ValueError(f"unknown method {method!r}")
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    u = np.zeros((model.T, model.m))
    history = []
    for it in range(1, max_iter + 1):
        eta = dual_forward(model, dual_backward(model, u, f))
        u_new = (1 - damping) * u + damping * control_from_momentum(model, eta)
        delta = float(np.abs(u_new - u).max())
        history.append(delta)
        u = u_new
        if not np.isfinite(delta) or delta > 1e100:
            break  # diverging
        if delta < tol:
            y = dual_backward(model, u, f)
            eta = dual_forward(model, y)
            return DualSolution(f, u, y, eta, _residual(model, u, eta), "fixed_point", it, history)
    sol = None
    if np.all(np.isfinite(u)):
        y = dual_backward(model, u, f)
        eta = dual_forward(model, y)
        sol = DualSolution(f, u, y, eta, _residual(model, u, eta), "fixed_point", len(history), history)
    raise NonConvergenceError(
        f"layer iteration did not converge in {len(history)} layers (last update {history[-1]:.3g}); "
        "retry with smaller damping or method='direct'",
        residual=np.inf if sol is None else sol.residual, iterations=len(history), solution=sol)


def predict_linear(model, sol, z):
    """Dual-filter estimate of f'X_T from Z_{1:T} using optimal weights."""
    if not sol.optimal:
        raise ValueError(f"solution is not optimal (residual {sol.residual:.3g})")
    z = np.asarray(z, dtype=float).reshape(-1, model.m)
    if z.shape[0] != model.T:
        raise ValueError(f"expected {model.T} observations, got {z.shape[0]}")
    mean = model.mu0 @ sol.y[0] - float(np.sum(sol.u * z))
    return GaussianPrediction(mean=float(mean), variance=2.0 * dual_cost(model, sol.u, sol.f), weights=-sol.u)


def random_model(rng, d, m, T, tau, scale=0.9, obs_gain=1.0, noise=1.0):
    """A well conditioned random model (used by tests and the benchmark).

    Lag matrices are scaled so that sum_s ||A_s||_2 <= ``scale``.
    """
    tau = min(tau, T)
    A = rng.standard_normal((tau, d, d))
    A /= np.linalg.norm(A, ord=2, axis=(1, 2))[:, None, None]
    A *= scale / tau
    C = obs_gain * rng.standard_normal((m, d)) / np.sqrt(d)

    def spd(k, floor):
        G = rng.standard_normal((k, k))
        return G @ G.T / k + floor * np.eye(k)

    return LinearGaussianModel(
        A=A, C=C, Q=0.5 * spd(d, 0.1), R=noise * spd(m, 0.5), mu0=rng.standard_normal(d),
        Sigma0=spd(d, 0.1), T=T)


def _timed(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_complexity(dims, horizons, repeats=3, seed=0, methods=("dual_layer", "dual_solve", "kalman"),
                     kalman_dims=None):
    """Median wall-clock seconds for the tau = T configuration.

    Returns rows ``{"method", "d", "T", "seconds"}``.  ``kalman_dims``
    overrides ``dims`` for the recursive filter, whose O((Td)^2) state
    limits the feasible d at large T.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for method in methods:
        for d in (kalman_dims or dims) if method == "kalman" else dims:
            for T in horizons:
                model = random_model(rng, d, 1, T, T, scale=0.5, obs_gain=0.3)
                f = np.ones(d)
                if method == "dual_layer":
                    eta = np.zeros((T, d))
                    linear_layer(model, eta, f)  # warm the lag-stack cache
                    sec = _timed(lambda: linear_layer(model, eta, f), repeats)
                elif method == "dual_solve":
                    dual_filter_solve(model, f, tol=1e-10, damping=1.0)
                    sec = _timed(lambda: dual_filter_solve(model, f, tol=1e-10, damping=1.0), repeats)
                elif method == "kalman":
                    z = simulate(model, seed=int(rng.integers(2**31))).z[:T]
                    sec = _timed(lambda: kalman_augmented(model, z, f, weights=False), repeats)
                else:
                    raise ValueError(f"unknown method {method!r}")
                rows.append({"method": method, "d": d, "T": T, "seconds": sec})
    return rows


def fit_slopes(rows, by="T"):
    """Log-log slope of seconds against ``by`` for each (method, other dim) group.

    Returns a dict ``(method, fixed) -> (slope, stderr)``.
    """
    other = "d" if by == "T" else "T"
    groups = {}
    for r in rows:
        groups.setdefault((r["method"], r[other]), []).append((r[by], r["seconds"]))
    out = {}
    for key, pts in groups.items():
        if len(pts) < 2:
            continue
        x, y = map(np.asarray, zip(*sorted(pts)))
        if len(pts) > 2:
            coef, cov = np.polyfit(np.log(x), np.log(y), 1, cov=True)
            out[key] = (float(coef[0]), float(np.sqrt(cov[0, 0])))
        else:
            out[key] = (loglog_slope(x, y), float("nan"))
    return out


def dual_memory_profile(d, horizons, seed=0):
    """Peak bytes allocated by one dual-filter layer, per horizon (model excluded)."""
    rng = np.random.default_rng(seed)
    peaks = []
    for T in horizons:
        model = random_model(rng, d, 1, T, T, scale=0.5, obs_gain=0.3)
        eta = np.zeros((T, d))
        f = np.ones(d)
        linear_layer(model, eta, f)
        tracemalloc.start()
        linear_layer(model, eta, f)
        peaks.append(tracemalloc.get_traced_memory()[1])
        tracemalloc.stop()
    return peaks
