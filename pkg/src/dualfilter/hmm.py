"""Hidden Markov models with the offset convention P(Z_{t+1} = z | X_t = x) = C(x, z).

States are indexed 0..d-1 and observations 0..m.  A path of states
X_0..X_T comes with observations Z_1..Z_{T+1}; ``z[t]`` holds Z_{t+1}.
"""
import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._numerics import ModelError

STOCH_TOL = 1e-12


class ImpossiblePathError(ValueError):
    """The observation path has probability zero under the model."""

    def __init__(self, message, t):
        super().__init__(message)
        self.t = t


def _check_stochastic(M, name):
    if np.any(M < 0):
        raise ModelError(f"{name} has negative entries")
    if not np.allclose(M.sum(axis=-1), 1.0, rtol=0, atol=STOCH_TOL):
        raise ModelError(f"rows of {name} must sum to 1")


@dataclass(frozen=True, eq=False)
class Hmm:
    A: np.ndarray  # (d, d) row stochastic transition
    C: np.ndarray  # (d, m+1) row stochastic emission
    mu: np.ndarray  # (d,) initial law of X_0

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        C = np.array(self.C, dtype=float)
        mu = np.array(self.mu, dtype=float)
        d = A.shape[0]
        if A.shape != (d, d) or C.ndim != 2 or C.shape[0] != d or mu.shape != (d,):
            raise ModelError(f"inconsistent shapes A{A.shape} C{C.shape} mu{mu.shape}")
        if C.shape[1] < 2:
            raise ModelError("need at least two observation symbols")
        for name, M in (("A", A), ("C", C), ("mu", mu)):
            _check_stochastic(M, name)
            M.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "mu", mu)

    @property
    def d(self):
        return self.A.shape[0]

    @property
    def m(self):
        """Largest observation symbol; the alphabet is {0, ..., m}."""
        return self.C.shape[1] - 1

    def to_dict(self):
        return {"d": self.d, "m": self.m, "A": self.A.tolist(), "C": self.C.tolist(), "mu": self.mu.tolist()}

    @classmethod
    def from_dict(cls, data):
        hmm = cls(A=data["A"], C=data["C"], mu=data["mu"])
        if "d" in data and data["d"] != hmm.d or "m" in data and data["m"] != hmm.m:
            raise ModelError("declared d/m disagree with the matrices")
        return hmm


def two_cycle_patterns(d, q):
    """The long and short emission patterns of the two-cycle chain."""
    return (1, 1) + (0,) * (d - 2), (1,) + (0,) * q


def two_cycle(d, q, start=None):
    """Two-cycle HMM: a long cycle of length d and a short one of length q+1.

    In 1-based labels, x -> x+1 for x < d and state d moves to 1 or to d-q
    with probability 1/2 each.  States 1 and d emit 1, the rest emit 0.  By
    default X_0 is state d, so every sample path starts at a cycle boundary.
    """
    if d < 4 or not 1 <= q < d - 2:
        raise ModelError(f"need d >= 4 and 1 <= q < d-2, got d={d}, q={q}")
    A = np.zeros((d, d))
    for x in range(d - 1):
        A[x, x + 1] = 1.0
    A[d - 1, 0] = 0.5
    A[d - 1, d - 1 - q] = 0.5
    C = np.zeros((d, 2))
    C[:, 0] = 1.0
    C[[0, d - 1]] = [0.0, 1.0]
    mu = np.zeros(d)
    mu[d - 1 if start is None else start] = 1.0
    return Hmm(A, C, mu)


def split_cycles(z, d, q):
    """Parse a two-cycle observation sequence into 'long'/'short' cycles.

    Returns the list of complete cycle labels; a trailing partial cycle must
    be a prefix of one of the patterns.  Raises ValueError otherwise.
    """
    long_, short = two_cycle_patterns(d, q)
    z = [int(v) for v in z]
    labels, i = [], 0
    while i < len(z):
        rest = tuple(z[i:])
        if rest[: len(long_)] == long_:
            labels.append("long")
            i += len(long_)
        elif rest[: len(short)] == short:
            labels.append("short")
            i += len(short)
        elif long_[: len(rest)] == rest or short[: len(rest)] == rest:
            break
        else:
            raise ValueError(f"sequence does not parse at position {i}")
    return labels


def _sample_rows(P, idx, u):
    cdf = np.cumsum(P[idx], axis=-1)
    return np.minimum((u[..., None] > cdf).sum(axis=-1), P.shape[1] - 1)


def simulate_hmm(hmm, T, seed=None, n_paths=None):
    """Sample X_0..X_T and Z_1..Z_{T+1}.

    With ``n_paths`` the result is batched: arrays of shape (n_paths, T+1).
    """
    rng = np.random.default_rng(seed)
    shape = () if n_paths is None else (n_paths,)
    x = np.empty(shape + (T + 1,), dtype=np.int64)
    z = np.empty(shape + (T + 1,), dtype=np.int64)
    x[..., 0] = _sample_rows(hmm.mu[None], np.zeros(shape, dtype=int), rng.random(shape))
    for t in range(T + 1):
        z[..., t] = _sample_rows(hmm.C, x[..., t], rng.random(shape))
        if t < T:
            x[..., t + 1] = _sample_rows(hmm.A, x[..., t], rng.random(shape))
    return x, z


@dataclass
class FilterPath:
    pi: np.ndarray  # (T, d): pi_1..pi_T
    loglik: float  # log P(Z_{1:T})
    predictive: np.ndarray = field(repr=False, default=None)  # (T+1, m+1): P(Z_{t+1} | Z_{1:t}), t = 0..T


def forward_filter(hmm, z):
    """Exact filter pi_t = P(X_t | Z_{1:t}) for t = 1..T.

    Each step corrects pi_t with Z_{t+1} (emitted by X_t) and then
    propagates through A.
    """
    z = np.asarray(z, dtype=np.int64)
    if z.ndim != 1 or (z.size and (z.min() < 0 or z.max() > hmm.m)):
        raise ValueError(f"observations must be a 1-d sequence in 0..{hmm.m}")
    T = z.size
    pi = np.empty((T, hmm.d))
    pred = np.empty((T + 1, hmm.m + 1))
    cur = hmm.mu
    loglik = 0.0
    for t in range(T):
        pred[t] = cur @ hmm.C
        beta = cur * hmm.C[:, z[t]]
        norm = beta.sum()
        if norm <= 0.0:
            raise ImpossiblePathError(f"observation Z_{t + 1} = {z[t]} has probability zero", t + 1)
        loglik += math.log(norm)
        cur = (beta / norm) @ hmm.A
        pi[t] = cur
    pred[T] = cur @ hmm.C
    return FilterPath(pi=pi, loglik=loglik, predictive=pred)


def next_token(hmm, pi):
    """P(Z_{t+1} = z | Z_{1:t}) = sum_x pi_t(x) C(x, z)."""
    return np.asarray(pi) @ hmm.C


def filter_predictor(hmm):
    """Predictor backed by the exact filter of ``hmm``.

    The returned callable maps Z_{1:T} to the (T, m+1) array whose row t-1 is
    the predicted law of Z_{t+1} given Z_{1:t}.  If the path is impossible
    under ``hmm`` the rows from that point on are NaN.
    """

    def predict(z):
        z = np.asarray(z, dtype=np.int64)
        try:
            return forward_filter(hmm, z).predictive[1:]
        except ImpossiblePathError as exc:
            out = np.full((z.size, hmm.m + 1), np.nan)
            k = exc.t - 1  # Z_1..Z_k are possible; the last filled row gives Z_{k+1} probability 0
            out[:k] = forward_filter(hmm, z[:k]).predictive[1:]
            return out

    return predict


def uniform_predictor(m):
    return lambda z: np.full((len(z), m + 1), 1.0 / (m + 1))


def unigram_predictor(freq):
    freq = np.asarray(freq, dtype=float)
    return lambda z: np.tile(freq, (len(z), 1))


def _path_loss(pred, targets):
    p = pred[np.arange(len(targets)), targets]
    if np.any(np.isnan(p)) or np.any(p <= 0):
        return math.inf
    return float(-np.log(p).mean())


def cross_entropy(truth, predictor, T, paths=None, n_paths=200, seed=None, exact=False, max_paths=10**6):
    """Average next-token loss in nats/token over t = 1..T.

    The loss of a path is the mean of -log q(Z_{t+1} | Z_{1:t}) over t = 1..T.
    It is averaged over ``paths`` (each of length >= T+1), over ``n_paths``
    fresh samples from ``truth``, or, with ``exact=True``, over all
    (m+1)^{T+1} sequences weighted by their probability under ``truth``.
    Returns ``inf`` when the predictor assigns probability zero to a token
    that occurs.
    """
    if exact:
        n = (truth.m + 1) ** (T + 1)
        if n > max_paths:
            raise ValueError(f"exact enumeration over {n} paths exceeds limit {max_paths}")
        total = 0.0
        for seq in itertools.product(range(truth.m + 1), repeat=T + 1):
            seq = np.asarray(seq)
            try:
                prob = math.exp(forward_filter(truth, seq).loglik)
            except ImpossiblePathError:
                continue
            loss = _path_loss(predictor(seq[:T]), seq[1:])
            if math.isinf(loss):
                warnings.warn("predictor assigns zero probability to a possible token", RuntimeWarning)
                return math.inf
            total += prob * loss
        return total
    if paths is None:
        _, paths = simulate_hmm(truth, T, seed=seed, n_paths=n_paths)
    losses = [_path_loss(predictor(np.asarray(p)[:T]), np.asarray(p)[1:T + 1]) for p in paths]
    if any(math.isinf(v) for v in losses):
        warnings.warn("predictor assigns zero probability to an observed token", RuntimeWarning)
        return math.inf
    return float(np.mean(losses))


def entropy_benchmark(hmm, T, paths=None, n_paths=200, seed=None, exact=False):
    """Loss of the true filter: the minimum achievable cross-entropy."""
    return cross_entropy(hmm, filter_predictor(hmm), T, paths=paths, n_paths=n_paths, seed=seed, exact=exact)


def perturb(hmm, eps, target="transition"):
    """Mix A (or C) with the uniform distribution: (1 - eps) M + eps / n."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    if target == "transition":
        A = (1 - eps) * hmm.A + eps / hmm.d
        return Hmm(A / A.sum(axis=1, keepdims=True), hmm.C, hmm.mu)
    if target == "emission":
        C = (1 - eps) * hmm.C + eps / (hmm.m + 1)
        return Hmm(hmm.A, C / C.sum(axis=1, keepdims=True), hmm.mu)
    raise ValueError(f"target must be 'transition' or 'emission', got {target!r}")


@dataclass
class BaumWelchFit:
    hmm: Hmm
    loglik: np.ndarray  # per-iteration total log-likelihood of the selected restart
    restart_logliks: list = field(default_factory=list)


def _estep(hmm, Z):
    """Scaled forward-backward on a batch Z of shape (N, L) of Z_1..Z_L."""
    N, L = Z.shape
    d = hmm.d
    E = hmm.C[:, Z].transpose(1, 2, 0)  # (N, L, d): C(x, Z_t)
    alpha = np.empty((N, L, d))
    scale = np.empty((N, L))
    a = hmm.mu[None] * E[:, 0]
    for t in range(L):
        if t:
            a = (alpha[:, t - 1] @ hmm.A) * E[:, t]
        s = a.sum(axis=1)
        s = np.where(s > 0, s, np.finfo(float).tiny)
        scale[:, t] = s
        alpha[:, t] = a / s[:, None]
    beta = np.empty((N, L, d))
    beta[:, -1] = 1.0
    for t in range(L - 2, -1, -1):
        beta[:, t] = ((beta[:, t + 1] * E[:, t + 1]) @ hmm.A.T) / scale[:, t + 1][:, None]
    gamma = alpha * beta
    gamma /= gamma.sum(axis=2, keepdims=True)
    # xi summed over time and sequences
    if L > 1:
        w = beta[:, 1:] * E[:, 1:] / scale[:, 1:, None]  # (N, L-1, d)
        xi = np.einsum("ntx,nty->xy", alpha[:, :-1], w) * hmm.A
    else:
        xi = np.zeros((d, d))
    return gamma, xi, float(np.log(scale).sum())


def _mstep(hmm, stats, m):
    gamma0, gsum_trans, xi, emit = stats
    d = hmm.d
    mu = gamma0 / gamma0.sum()
    A = hmm.A.copy()
    rows = xi.sum(axis=1)
    ok = rows > 0
    A[ok] = xi[ok] / rows[ok, None]
    C = hmm.C.copy()
    er = emit.sum(axis=1)
    ok = er > 0
    C[ok] = emit[ok] / er[ok, None]
    return Hmm(A, C, mu)


def baum_welch(z_paths, d_hat, m, iters=200, seed=None, restarts=5, tol=0.0):
    """Fit a d_hat-state HMM to observation paths by EM.

    Each path is Z_1..Z_L and pairs Z_{t+1} with X_t, so mu is the law of X_0.
    Initial parameters are Dirichlet(1) rows; the restart with the highest
    final log-likelihood is returned.  Iteration stops early when the
    log-likelihood gain falls below ``tol`` (0 disables early stopping).
    """
    if d_hat < 1:
        raise ValueError("d_hat must be >= 1")
    paths = [np.asarray(p, dtype=np.int64) for p in z_paths]
    if not paths or all(p.size == 0 for p in paths):
        raise ValueError("no observation data")
    if any(p.min() < 0 or p.max() > m for p in paths if p.size):
        raise ValueError(f"observations must lie in 0..{m}")
    groups = {}
    for p in paths:
        if p.size:
            groups.setdefault(p.size, []).append(p)
    batches = [np.stack(g) for g in groups.values()]
    rng = np.random.default_rng(seed)
    best, runs = None, []
    for _ in range(restarts):
        hmm = Hmm(rng.dirichlet(np.ones(d_hat), size=d_hat), rng.dirichlet(np.ones(m + 1), size=d_hat),
                  rng.dirichlet(np.ones(d_hat)))
        history = []
        for it in range(iters + 1):
            gamma0 = np.zeros(d_hat)
            xi = np.zeros((d_hat, d_hat))
            emit = np.zeros((d_hat, m + 1))
            ll = 0.0
            for Z in batches:
                gamma, xi_b, ll_b = _estep(hmm, Z)
                gamma0 += gamma[:, 0].sum(axis=0)
                xi += xi_b
                for k in range(m + 1):
                    emit[:, k] += (gamma * (Z == k)[..., None]).sum(axis=(0, 1))
                ll += ll_b
            history.append(ll)
            if it == iters or (tol > 0 and it > 0 and history[-1] - history[-2] < tol):
                break
            hmm = _mstep(hmm, (gamma0, None, xi, emit), m)
        history = np.asarray(history)
        runs.append(history)
        if best is None or history[-1] > best[1][-1]:
            best = (hmm, history)
    return BaumWelchFit(hmm=best[0], loglik=best[1], restart_logliks=runs)
