"""Exact dual filter on the full observation tree.

Every node at depth t is an observation prefix z_{1:t}; node k at depth t
has children k*(m+1) + z at depth t+1.  Adapted processes are arrays
indexed by node, so adaptedness holds by construction.  Everything here
enumerates (m+1)^T leaves and is meant as a desk-scale oracle.
"""
from dataclasses import dataclass

import numpy as np

from .dual_hmm import (cost_params, decompose, dual_filter_path, encoding_matrix, heatmap, iterate_layers,
                       node_control, phi, project_simplex, query_weights_path, solve_from_partial_sums)

MAX_LEAVES = 10**6


class TreeTooLargeError(ValueError):
    """Raised when (m+1)^T exceeds the enumeration limit."""


@dataclass(frozen=True, eq=False)
class ObservationTree:
    """Joint law of (X_t, Z_{1:t}) on every node.

    ``alpha[t]`` is (n_t, d) with P(X_t = x, Z_{1:t} = node); ``prob[t]`` its
    row sums and ``pi[t]`` the filter.  On nodes of probability zero the
    filter is taken to be the parent's filter pushed through A without the
    (impossible) correction, so that every node carries a valid distribution.
    """

    hmm: object
    T: int
    alpha: list
    prob: list
    pi: list

    @property
    def m(self):
        return self.hmm.m

    @property
    def d(self):
        return self.hmm.d

    def n_nodes(self, t):
        return (self.m + 1) ** t

    def path_nodes(self, z):
        """Node index at depths 0..len(z) along the prefix z."""
        idx = [0]
        for zt in z:
            idx.append(idx[-1] * (self.m + 1) + int(zt))
        return np.asarray(idx)

    def prefixes(self, t):
        """All prefixes at depth t as an (n_t, t) integer array, in node order."""
        k = np.arange(self.n_nodes(t))
        out = np.empty((k.size, t), dtype=np.int64)
        for j in range(t - 1, -1, -1):
            k, out[:, j] = np.divmod(k, self.m + 1)
        return out


def observation_tree(hmm, T, max_leaves=MAX_LEAVES):
    n = (hmm.m + 1) ** T
    if n > max_leaves:
        raise TreeTooLargeError(f"tree with {n} leaves exceeds limit {max_leaves}")
    alpha, prob, pi = [hmm.mu[None].copy()], [np.ones(1)], [hmm.mu[None].copy()]
    for _ in range(T):
        a = alpha[-1][:, None, :] * hmm.C.T[None]  # (n, m+1, d)
        a = (a @ hmm.A).reshape(-1, hmm.d)
        p = a.sum(axis=1)
        fallback = np.repeat(pi[-1] @ hmm.A, hmm.m + 1, axis=0)
        pos = p > 0
        alpha.append(a)
        prob.append(p)
        pi.append(np.where(pos[:, None], a / np.where(pos, p, 1.0)[:, None], fallback))
    return ObservationTree(hmm=hmm, T=T, alpha=alpha, prob=prob, pi=pi)


@dataclass
class BsdeSolution:
    """(Y, V) on every node; ``U`` is the control that produced it.

    Per depth t: Y[t] is (n_t, k, d), V[t] and U[t] are (n_t, k, d, m) and
    (n_t, k, m), with k terminal conditions solved at once.
    """

    Y: list
    V: list
    U: list


def _as_terminal(f, d):
    f = np.asarray(f, dtype=float)
    if f.shape[0] != d:
        raise ValueError(f"terminal condition has {f.shape[0]} rows, expected {d}")
    return f.reshape(d, -1)


def _as_control(U, tree, k):
    if len(U) != tree.T:
        raise ValueError(f"control has {len(U)} depths, tree has {tree.T}")
    out = []
    for t, u in enumerate(U):
        u = np.asarray(u, dtype=float)
        if u.ndim == 2:
            u = u[:, None, :]
        out.append(np.broadcast_to(u, (tree.n_nodes(t), k, tree.m)))
    return out


def _children_values(Ynext, A, m):
    """g[n, k, x, z] = (A Y^{child z})(x) for the parents of Ynext."""
    n_child, k, d = Ynext.shape
    Yc = Ynext.reshape(n_child // (m + 1), m + 1, k, d)
    return np.einsum("xy,nzky->nkxz", A, Yc)


def bsde_solve_tree(tree, U, f, params=None):
    """Solve the BSDE backward with a given adapted control U.

    At a node, decomposing g_x(z) = (A Y^{child z}_{t+1})(x) over z gives
    V_t(x) and Y_t(x) = mean_z g_x(z) + c(x)'(U_t + V_t(x)).
    """
    hmm = tree.hmm
    params = params or cost_params(hmm)
    F = _as_terminal(f, hmm.d)
    k = F.shape[1]
    U = _as_control(U, tree, k)
    Y = [None] * (tree.T + 1)
    V = [None] * tree.T
    Y[tree.T] = np.broadcast_to(F.T, (tree.n_nodes(tree.T), k, hmm.d)).copy()
    for t in range(tree.T - 1, -1, -1):
        gbar, gt = decompose(_children_values(Y[t + 1], hmm.A, hmm.m))
        V[t] = gt
        Y[t] = gbar + np.einsum("xi,nkxi->nkx", params.c, U[t][:, :, None, :] + gt)
    return BsdeSolution(Y=Y, V=V, U=[np.array(u) for u in U])


def bsde_residual(tree, sol, params=None):
    """Largest violation of Y_t(x) = (A Y_{t+1})(x) + c'(U + V(x)) - V(x)' e(z) over nodes, children, states."""
    hmm = tree.hmm
    params = params or cost_params(hmm)
    E = encoding_matrix(hmm.m)
    worst = 0.0
    for t in range(tree.T):
        g = _children_values(sol.Y[t + 1], hmm.A, hmm.m)  # (n, k, d, m+1)
        drive = np.einsum("xi,nkxi->nkx", params.c, sol.U[t][:, :, None, :] + sol.V[t])
        rhs = g + drive[..., None] - np.einsum("nkxi,zi->nkxz", sol.V[t], E)
        worst = max(worst, float(np.abs(sol.Y[t][..., None] - rhs).max()))
    return worst


def estimator_tree(tree, sol):
    """S on every node: mu(Y_0) - sum_{t<=s} U_{t-1}' e(z_t) along the prefix.  Per depth (n_t, k)."""
    hmm = tree.hmm
    E = encoding_matrix(hmm.m)
    S = [sol.Y[0] @ hmm.mu]
    for t in range(tree.T):
        step = np.einsum("nki,zi->nzk", sol.U[t], E)  # (n, m+1, k)
        S.append((S[-1][:, None, :] - step).reshape(-1, S[-1].shape[1]))
    return S


def cost_J(tree, U, f, params=None):
    """var mu(Y_0) + E sum_t l(Y_{t+1}, V_t, U_t; X_t), exact over the tree.  Shape (k,), or scalar for 1-D f."""
    hmm = tree.hmm
    params = params or cost_params(hmm)
    sol = bsde_solve_tree(tree, U, f, params)
    J = sol.Y[0][0] ** 2 @ hmm.mu - (sol.Y[0][0] @ hmm.mu) ** 2
    for t in range(tree.T):
        n, k, d = sol.Y[t].shape
        Yc = sol.Y[t + 1].reshape(n, hmm.m + 1, k, d)
        gam = np.einsum("xy,nzky->nzkx", hmm.A, Yc ** 2) - np.einsum("xy,nzky->nzkx", hmm.A, Yc) ** 2
        w = sol.U[t][:, :, None, :] + sol.V[t]  # (n, k, d, m)
        quad = np.einsum("nkxi,xij,nkxj->nkx", w, params.R, w)
        joint = tree.alpha[t][:, None, :] * hmm.C.T[None]  # (n, m+1, d): P(X_t = x, Z_{1:t+1})
        J = J + np.einsum("nzx,nzkx->k", joint, gam) + np.einsum("nzx,nkx->k", joint, quad)
    return _squeeze(J, f)


def duality_check(tree, U, f, params=None):
    """Return (J, mse, gap) with mse = E|f(X_T) - S_T|^2 by enumeration of the leaves."""
    params = params or cost_params(tree.hmm)
    J = cost_J(tree, U, f, params)
    sol = bsde_solve_tree(tree, U, f, params)
    S_T = estimator_tree(tree, sol)[-1]  # (n_T, k)
    F = _as_terminal(f, tree.d)
    err = (F.T[None] - S_T[:, :, None]) ** 2  # (n, k, d)
    mse = _squeeze(np.einsum("nx,nkx->k", tree.alpha[tree.T], err), f)
    return J, mse, np.abs(np.asarray(J) - np.asarray(mse))


def _squeeze(v, f):
    return float(v[0]) if np.ndim(f) == 1 else v


def extract_weights(S_T, m):
    """Unique representation S_T = const - sum_t U_{t-1}' e(z_t) of a leaf function.

    ``S_T`` has (m+1)^T leading entries (optionally a trailing axis of
    several functions).  Working backward, a parent's value is the mean of
    its children and U(i) = -(S_child(i) - S_parent).  Returns
    ``(const, U)`` with U[t] of shape (n_t, m) (or (n_t, k, m)).
    """
    S = np.asarray(S_T, dtype=float)
    vec = S.ndim == 1
    S = S.reshape(S.shape[0], -1)
    n = S.shape[0]
    T = 0
    while (m + 1) ** T < n:
        T += 1
    if (m + 1) ** T != n:
        raise ValueError(f"{n} leaves is not a power of m+1 = {m + 1}")
    U = [None] * T
    for t in range(T - 1, -1, -1):
        mean, tilde = decompose(S.reshape(-1, m + 1, S.shape[1]).transpose(0, 2, 1))
        U[t] = -tilde
        S = mean
    if vec:
        return float(S[0, 0]), [u[:, 0] for u in U]
    return S[0], U


def reconstruct_leaves(const, U, m):
    """Inverse of :func:`extract_weights`: leaf values from (const, U)."""
    E = encoding_matrix(m)
    S = np.atleast_1d(np.asarray(const, dtype=float))[None]
    for u in U:
        u = u if u.ndim == 3 else u[:, None, :]
        S = (S[:, None, :] - np.einsum("nki,zi->nzk", u, E)).reshape(-1, S.shape[1])
    return S[:, 0] if np.ndim(const) == 0 else S


def filter_values(tree, f, depth=None):
    """pi_t(f) on every node of a depth (default T).  Shape (n_t,) or (n_t, k)."""
    t = tree.T if depth is None else depth
    return tree.pi[t] @ np.asarray(f, dtype=float)


def oracle_weights(tree, f, depth=None):
    """Optimal weights for S = pi_s(f): :func:`extract_weights` applied to the exact filter values."""
    return extract_weights(filter_values(tree, f, depth), tree.m)


def feedback_residual(tree, f, params=None, form="phi", reachable_only=False):
    """Max |U_oracle - feedback(Y, V; pi)| over nodes, with (Y, V) the tree solution under U_oracle.

    ``form="phi"`` evaluates the control law as written, with a pseudo-inverse
    of rho(R); ``form="node"`` uses the joint node solve of
    :func:`dualfilter.dual_hmm.node_control`, which agrees with the law when
    rho(R) is invertible and is its limit when it is not (deterministic
    emissions).  ``reachable_only`` skips nodes of probability zero, where
    the oracle weights are a convention.
    """
    if form not in ("phi", "node"):
        raise ValueError(f"unknown form {form!r}")
    params = params or cost_params(tree.hmm)
    _, U = oracle_weights(tree, f)
    sol = bsde_solve_tree(tree, U, f, params)
    worst = 0.0
    for t in range(tree.T):
        rho = tree.pi[t]
        if form == "phi":
            law = np.stack([[phi(sol.Y[t][n, j], sol.V[t][n, j].T, rho[n], params)
                             for j in range(sol.U[t].shape[1])] for n in range(tree.n_nodes(t))])
        else:
            h = sol.Y[t] - sol.U[t] @ params.c.T
            rv = np.einsum("nx,xij,nkxj->nki", rho, params.R, sol.V[t])
            law = node_control(h, rv, rho, params)
        err = np.abs(sol.U[t] - law).max(axis=(1, 2))
        if reachable_only:
            err = err[tree.prob[t] > 0]
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst


def solve_feedback_tree(tree, rho, f, params=None, depth=None):
    """Backward pass in which each node's control obeys the feedback law with rho.

    ``rho[t]`` is (n_t, d) for t = 0..depth-1.  With V fixed by the
    decomposition, Y and U at a node solve a joint linear system (see
    :func:`dualfilter.dual_hmm.node_control`).  Returns a :class:`BsdeSolution`.
    """
    hmm = tree.hmm
    params = params or cost_params(hmm)
    T = tree.T if depth is None else depth
    F = _as_terminal(f, hmm.d)
    k = F.shape[1]
    Y = [None] * (T + 1)
    V, U = [None] * T, [None] * T
    Y[T] = np.broadcast_to(F.T, (tree.n_nodes(T), k, hmm.d)).copy()
    for t in range(T - 1, -1, -1):
        gbar, gt = decompose(_children_values(Y[t + 1], hmm.A, hmm.m))
        h = gbar + np.einsum("xi,nkxi->nkx", params.c, gt)
        rv = np.einsum("nx,xij,nkxj->nki", rho[t], params.R, gt)
        U[t] = node_control(h, rv, rho[t], params)
        V[t] = gt
        Y[t] = h + U[t] @ params.c.T
    return BsdeSolution(Y=Y, V=V, U=U)


def layer_tree(tree, rho, reconstruction="partial_sums", params=None):
    """One exact layer on the tree: rho_{1:T} -> rho+_{1:T}.

    ``rho`` is a list with rho[t] of shape (n_t, d) for t = 1..T (rho[0] is
    ignored; the root always carries mu).  Two reconstructions:

    ``partial_sums``
        one backward pass from the d state indicators; at depth s the
        identities rho_s(Y_s^(i)) = mu(Y_0^(i)) - sum_{t<=s} U_{t-1}^(i)' e(z_t)
        are solved for rho_s (least squares when the d x d matrix loses rank).
    ``terminal``
        for each s a separate horizon-s problem with Y_s = 1_i, so that the
        left side is rho+_s(i) itself and no inversion is needed.

    Returns ``(rho_plus, n_rank_deficient)`` with rho_plus in the same layout.
    """
    hmm = tree.hmm
    params = params or cost_params(hmm)
    rho = [hmm.mu[None]] + [np.asarray(r, dtype=float) for r in rho[1:]]
    basis = np.eye(hmm.d)
    out = [hmm.mu[None].copy()]
    deficient = 0
    if reconstruction == "partial_sums":
        sol = solve_feedback_tree(tree, rho, basis, params)
        S = estimator_tree(tree, sol)
        for s in range(1, tree.T + 1):
            r, bad = solve_from_partial_sums(sol.Y[s], S[s])
            out.append(r)
            deficient += int(bad.sum())
    elif reconstruction == "terminal":
        for s in range(1, tree.T + 1):
            sol = solve_feedback_tree(tree, rho, basis, params, depth=s)
            S = estimator_tree(_Truncated(tree, s), sol)
            out.append(project_simplex(S[s]))
    else:
        raise ValueError(f"unknown reconstruction {reconstruction!r}")
    return out, deficient


class _Truncated:
    def __init__(self, tree, T):
        self.hmm, self.T = tree.hmm, T


def tree_distance(a, b, prob=None):
    """Max entry difference over depths 1..T, restricted to nodes with prob > 0 if ``prob`` is given.

    The filter on an impossible node is a convention, so comparisons that
    matter are made on reachable nodes only.
    """
    if prob is None:
        return max(float(np.abs(x - y).max()) for x, y in zip(a[1:], b[1:]))
    return max(float(np.abs(x - y)[p > 0].max()) for x, y, p in zip(a[1:], b[1:], prob[1:]))


def dual_filter_tree(tree, tol=1e-8, max_layers=100, damping=1.0, rho0=None, reconstruction="partial_sums"):
    """Iterate :func:`layer_tree` from uniform rho (or ``rho0``)."""
    params = cost_params(tree.hmm)
    if rho0 is None:
        rho0 = [np.full((tree.n_nodes(t), tree.d), 1.0 / tree.d) for t in range(tree.T + 1)]
    return iterate_layers(lambda r: layer_tree(tree, r, reconstruction, params), rho0, tol=tol,
                          max_layers=max_layers, damping=damping,
                          distance=lambda a, b: tree_distance(a, b, tree.prob))


def oracle_weights_path(hmm, z, targets=None, max_leaves=MAX_LEAVES):
    """Exact per-query weights along the path z, same layout as
    :func:`dualfilter.dual_hmm.query_weights_path`: (T, T, k, m)."""
    z = np.asarray(z, dtype=np.int64)
    T = z.size
    tree = observation_tree(hmm, T, max_leaves)
    F = hmm.C[:, 1:] if targets is None else np.asarray(targets, dtype=float).reshape(hmm.d, -1)
    nodes = tree.path_nodes(z)
    W = np.zeros((T, T, F.shape[1], hmm.m))
    for s in range(1, T + 1):
        _, U = extract_weights(filter_values(tree, F, s), hmm.m)
        for t in range(s):
            W[s - 1, t] = U[t][nodes[t]]
    return W


def weights_along_path(hmm, z, method="layer_path", targets=None, **kwargs):
    """Per-query weights and their heatmap along a path.

    ``method`` is ``"oracle_tree"`` (exact, enumerable T only) or
    ``"layer_path"`` (converged path-local dual filter; ``kwargs`` go to
    :func:`dualfilter.dual_hmm.dual_filter_path`).  Returns ``(W, H)`` with W
    of shape (T, T, k, m) and the (T, T) lower-triangular magnitudes H.
    """
    if method == "oracle_tree":
        W = oracle_weights_path(hmm, z, targets)
    elif method == "layer_path":
        state = dual_filter_path(hmm, z, **kwargs)
        if not state.converged:
            raise RuntimeError(f"layer iteration did not converge after {state.iteration} layers "
                               f"(last change {state.residual:.3g})")
        W = query_weights_path(hmm, state.rho, z, targets)
    else:
        raise ValueError(f"unknown method {method!r}")
    return W, heatmap(W)
