"""Dual filter for HMMs: encoding, cost parameters, control law and the path-local layer.

The prediction pi_T(f) is written as ``const - sum_t U_{t-1}' e(Z_t)`` with
data-dependent weights U_t in R^m.  The exact machinery on observation trees
lives in :mod:`dualfilter.tree`; this module holds the pieces shared by both
and the realised-path approximation used for long horizons.
"""
from dataclasses import dataclass, field

import numpy as np

from ._numerics import pinv


def encoding_matrix(m):
    """Rows e(0), ..., e(m): one-hot for z >= 1 and e(0) = -sum_z e(z)."""
    if m < 1:
        raise ValueError("m must be >= 1")
    E = np.zeros((m + 1, m))
    E[1:] = np.eye(m)
    E[0] = -1.0
    return E


def e_encode(z, m):
    if not 0 <= z <= m:
        raise ValueError(f"symbol {z} outside 0..{m}")
    return encoding_matrix(m)[z]


def decompose(s):
    """Split s: {0..m} -> R as s(z) = mean + tilde' e(z).

    Works along the last axis, so a stack of functions can be decomposed at
    once.  Returns ``(mean, tilde)`` with shapes ``s.shape[:-1]`` and
    ``s.shape[:-1] + (m,)``.
    """
    s = np.asarray(s, dtype=float)
    mean = s.mean(axis=-1)
    return mean, s[..., 1:] - mean[..., None]


def reconstruct(mean, tilde):
    """Inverse of :func:`decompose`: the values s(0..m)."""
    tilde = np.asarray(tilde, dtype=float)
    return np.asarray(mean)[..., None] + tilde @ encoding_matrix(tilde.shape[-1]).T


@dataclass(frozen=True, eq=False)
class CostParams:
    """Per-state quantities of the control cost.

    ``c[x]`` is E[e(Z_{t+1}) | X_t = x] and ``R[x]`` the conditional
    covariance of e(Z_{t+1}); ``gamma(f)`` is Var(f(X_{t+1}) | X_t = x).
    """

    A: np.ndarray
    c: np.ndarray  # (d, m)
    R: np.ndarray  # (d, m, m)

    def gamma(self, f):
        f = np.asarray(f, dtype=float)
        return (f ** 2) @ self.A.T - (f @ self.A.T) ** 2

    def running_cost(self, y, v, u):
        """l(y, v, u; x) for every x; ``v`` is (d, m) with row x equal to v(x)."""
        w = np.asarray(u)[None, :] + np.asarray(v)
        return self.gamma(y) + np.einsum("xi,xij,xj->x", w, self.R, w)


def cost_params(hmm):
    C = hmm.C
    c = C[:, 1:] - C[:, :1]
    m = hmm.m
    R = (np.einsum("xi,ij->xij", c, np.eye(m))
         + C[:, 0, None, None] * (np.eye(m) + np.ones((m, m)))[None]
         - np.einsum("xi,xj->xij", c, c))
    return CostParams(A=hmm.A, c=c, R=R)


def phi(y, v, rho, params):
    """Control law -rho(R)^+ (rho((c - rho(c)) y) + rho(R v)).

    ``v`` is m x d with column x equal to v(x).  The sign of the rho(R v)
    term is the one that makes the law the stationarity condition of the
    cost for the BSDE Y_t = AY_{t+1} + c'(U + V) - V'e(Z_{t+1}); with the
    opposite sign the exact optimal weights on a tree violate it.
    """
    rho = np.asarray(rho, dtype=float)
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    c, R = params.c, params.R
    rc = rho @ c
    term_y = (rho * y) @ c - rc * (rho @ y)
    term_v = np.einsum("x,xij,jx->i", rho, R, v)
    return -pinv(np.einsum("x,xij->ij", rho, R)) @ (term_y + term_v)


def predictive_cov(rho, params):
    """rho(R) + Cov_rho(c): covariance of e(Z_{t+1}) when X_t ~ rho.  Batched over rho."""
    rho = np.asarray(rho, dtype=float)
    c = params.c
    rc = rho @ c
    return (np.einsum("...x,xij->...ij", rho, params.R)
            + np.einsum("...x,xi,xj->...ij", rho, c, c)
            - rc[..., :, None] * rc[..., None, :])


def node_control(h, rv, rho, params):
    """Solve U = phi(h + c U, v; rho) for U at one or more nodes.

    ``h[..., x]`` is the part of Y(x) not involving U and ``rv`` is rho(R v).
    Substituting Y = h + c U turns the control law into
    ``(rho(R) + Cov_rho(c)) U = -(rho((c - rho(c)) h) + rho(R v))``, which we
    solve with a cutoff pseudo-inverse.  When rho(R) is invertible this is
    the same U as the control law; when it is singular (deterministic
    emissions) it is the limit of the control law rather than U = 0.

    Shapes: ``rho`` is (n, d); ``h`` is (n, k, d) for k terminal conditions;
    ``rv`` is (n, k, m) or None.  Returns (n, k, m).
    """
    rho = np.asarray(rho, dtype=float)
    c = params.c
    rc = rho @ c  # (n, m)
    wh = np.einsum("nx,nkx,xi->nki", rho, h, c) - np.einsum("nkx,nx,ni->nki", h, rho, rc)
    if rv is not None:
        wh = wh + rv
    G = pinv(predictive_cov(rho, params))  # (n, m, m)
    return -np.einsum("nij,nkj->nki", G, wh)


def project_simplex(v):
    """Clip negatives and renormalise along the last axis (uniform if nothing is left)."""
    v = np.clip(np.asarray(v, dtype=float), 0.0, None)
    s = v.sum(axis=-1, keepdims=True)
    d = v.shape[-1]
    return np.where(s > 0, v / np.where(s > 0, s, 1.0), 1.0 / d)


def solve_from_partial_sums(Ymat, p, rank_tol=1e-10):
    """Recover rho from the d scalar identities rho(Y^(i)) = p^(i).

    ``Ymat[..., i, x] = Y^(i)(x)``.  Least squares, then projection onto the
    simplex.  Returns ``(rho, rank_deficient)`` where the flag marks nodes
    whose matrix lost rank.
    """
    s = np.linalg.svd(Ymat, compute_uv=False)
    deficient = s[..., -1] <= rank_tol * s[..., 0]
    rho = np.einsum("...xi,...i->...x", pinv(Ymat, rtol=rank_tol, atol=0.0), p)
    return project_simplex(rho), deficient


@dataclass
class LayerState:
    """Iterate of a layer map together with its convergence record."""

    rho: object  # (T, d) along a path, or a per-depth list on a tree
    iteration: int = 0
    residual: float = np.inf
    history: list = field(default_factory=list)
    converged: bool = False
    rank_deficient: int = 0


def iterate_layers(layer, rho0, tol=1e-8, max_layers=100, damping=1.0, distance=None):
    """Repeat ``rho <- (1 - damping) rho + damping layer(rho)`` until the change is below tol.

    ``layer`` returns ``(rho_plus, n_rank_deficient)``.  ``distance`` measures
    the change between iterates (max absolute entry difference by default).
    """
    if distance is None:
        distance = lambda a, b: float(np.abs(np.asarray(a) - np.asarray(b)).max())  # noqa: E731
    state = LayerState(rho=rho0)
    rho = rho0
    for it in range(1, max_layers + 1):
        new, deficient = layer(rho)
        if damping != 1.0:
            new = _blend(rho, new, damping)
        change = distance(new, rho)
        state.history.append(change)
        state.rank_deficient = deficient
        rho = new
        if change < tol:
            state.converged = True
            break
    state.rho, state.iteration, state.residual = rho, it, state.history[-1]
    return state


def _blend(old, new, g):
    if isinstance(new, list):
        return [(1 - g) * a + g * b for a, b in zip(old, new)]
    return (1 - g) * old + g * new


# --- realised path --------------------------------------------------------

def _path_backward(hmm, params, rho_prev, Yend):
    """Backward pass with V = 0 along a path.

    ``rho_prev[t]`` is the filter guess at time t (t = 0..s-1) and ``Yend``
    the (k, d) terminal conditions at time s.  Returns Y of shape
    (s+1, k, d) and U of shape (s, k, m).
    """
    s = rho_prev.shape[0]
    k, d = Yend.shape
    Y = np.empty((s + 1, k, d))
    U = np.empty((s, k, hmm.m))
    Y[s] = Yend
    A_T = hmm.A.T
    c_T = params.c.T
    for t in range(s - 1, -1, -1):
        h = Y[t + 1] @ A_T
        U[t] = node_control(h[None], None, rho_prev[t][None], params)[0]
        Y[t] = h + U[t] @ c_T
    return Y, U


def control_gains(hmm, rho_prev, params=None):
    """Feedback gains L_t with U_t = L_t (A Y_{t+1}) when V = 0.

    ``rho_prev`` is (n, d).  Returns ``(L, singular)`` with L of shape
    (n, m, d) and a flag per row marking a singular predictive covariance.
    """
    params = params or cost_params(hmm)
    rho_prev = np.asarray(rho_prev, dtype=float)
    c = params.c
    rc = rho_prev @ c
    W = np.einsum("nx,nxi->nix", rho_prev, c[None] - rc[:, None, :])
    cov = predictive_cov(rho_prev, params)
    s = np.linalg.svd(cov, compute_uv=False)
    singular = s[:, -1] <= np.maximum(1e-10 * s[:, 0], 1e-12)
    return -pinv(cov) @ W, singular


def layer_path(hmm, rho, z, params=None):
    """One path-local layer: rho_{1:T} -> rho+_{1:T} along the observed Z_{1:T}.

    For a query time s and a state indicator f = 1_i, the dual system is
    solved backward from Y_s = f along the realised path with V = 0, using
    the control law with rho_t in place of the filter; then
    rho+_s(i) = mu(Y_0) - sum_{t<=s} U_{t-1}' e(Z_t).  Since everything is
    linear in f, all (s, i) pairs are produced by one forward adjoint sweep::

        rho+_0 = mu,   rho+_{t+1} = (rho+_t + (rho+_t(c) - e(Z_{t+1}))' L_t) A

    Returns ``(rho_plus, n_singular)``.
    """
    params = params or cost_params(hmm)
    z = np.asarray(z, dtype=np.int64)
    rho = np.asarray(rho, dtype=float)
    T, d = z.size, hmm.d
    if rho.shape != (T, d):
        raise ValueError(f"rho must have shape {(T, d)}, got {rho.shape}")
    rho_prev = np.vstack([hmm.mu[None], rho[:-1]])
    L, singular = control_gains(hmm, rho_prev, params)
    ez = encoding_matrix(hmm.m)[z]
    out = np.empty((T, d))
    r = hmm.mu
    for t in range(T):
        r = (r + (r @ params.c - ez[t]) @ L[t]) @ hmm.A
        out[t] = r
    return project_simplex(out), int(singular.sum())


def dual_filter_path(hmm, z, tol=1e-8, max_layers=100, damping=1.0, rho0=None):
    """Iterate :func:`layer_path` from the uniform guess (or ``rho0``) to convergence."""
    params = cost_params(hmm)
    z = np.asarray(z, dtype=np.int64)
    if rho0 is None:
        rho0 = np.full((z.size, hmm.d), 1.0 / hmm.d)
    return iterate_layers(lambda r: layer_path(hmm, r, z, params), rho0, tol=tol, max_layers=max_layers,
                          damping=damping)


def path_predictor(hmm, tol=1e-8, max_layers=100, damping=1.0):
    """Next-token predictor from the converged path-local dual filter."""

    def predict(z):
        res = dual_filter_path(hmm, z, tol=tol, max_layers=max_layers, damping=damping)
        return project_simplex(res.rho @ hmm.C)

    return predict


def query_weights_path(hmm, rho, z, targets=None, params=None):
    """Weights of the horizon-s problems along a path, for s = 1..T.

    Row s-1 of the returned (T, T, k, m) array holds U^(s)_{t-1}, t <= s,
    the weights representing rho_s(targets) from Z_{1:s}; entries with t > s
    are zero.  ``targets`` (d, k) defaults to C(., 1..m), the next-token
    probabilities of the nonzero symbols.
    """
    params = params or cost_params(hmm)
    z = np.asarray(z, dtype=np.int64)
    rho = np.asarray(rho, dtype=float)
    F = hmm.C[:, 1:] if targets is None else np.asarray(targets, dtype=float).reshape(hmm.d, -1)
    T = z.size
    rho_prev = np.vstack([hmm.mu[None], rho[:-1]])
    W = np.zeros((T, T, F.shape[1], hmm.m))
    for s in range(1, T + 1):
        _, U = _path_backward(hmm, params, rho_prev[:s], F.T)
        W[s - 1, :s] = U
    return W


def heatmap(W):
    """Magnitudes |U^(s)_{t-1}| (Frobenius over targets and components), shape (T, T)."""
    return np.sqrt((np.asarray(W) ** 2).sum(axis=(-2, -1)))
