"""Small linear-algebra helpers shared by the solvers."""
import numpy as np

EIG_CLIP = 1e-12
PINV_RTOL = 1e-10
PINV_ATOL = 1e-12


class ModelError(ValueError):
    """Raised when model parameters violate their structural invariants."""


def check_psd(M, name, strict=False, tol=1e-10):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ModelError(f"{name} must be square, got shape {M.shape}")
    if not np.allclose(M, M.T, atol=tol * max(1.0, np.abs(M).max())):
        raise ModelError(f"{name} is not symmetric")
    w = np.linalg.eigvalsh(M)
    scale = max(1.0, np.abs(w).max())
    if strict and w.min() <= 0:
        raise ModelError(f"{name} is not positive definite")
    if w.min() < -tol * scale:
        raise ModelError(f"{name} is not positive semidefinite (min eig {w.min():.3g})")
    return M


def psd_sqrt(M):
    """Return L with L @ L.T == M for symmetric PSD M, clipping tiny negative eigenvalues."""
    w, V = np.linalg.eigh(np.asarray(M, dtype=float))
    scale = max(1.0, np.abs(w).max())
    if w.min() < -1e-8 * scale:
        raise ModelError(f"covariance is not positive semidefinite (min eig {w.min():.3g})")
    w = np.where(w < EIG_CLIP, 0.0, w)
    return V * np.sqrt(w)


def pinv(M, rtol=PINV_RTOL, atol=PINV_ATOL):
    """Pseudo-inverse of a matrix or a stack of matrices.

    Singular values below ``max(rtol * s_max, atol)`` are dropped.  The
    absolute floor keeps round-off sized matrices (e.g. the predictive
    covariance of a point-mass filter) from being inverted.
    """
    M = np.asarray(M, dtype=float)
    u, s, vt = np.linalg.svd(M)
    smax = s.max(axis=-1, keepdims=True)
    cut = np.maximum(rtol * smax, atol)
    sinv = np.where(s > cut, 1.0 / np.where(s > cut, s, 1.0), 0.0)
    return np.swapaxes(vt, -1, -2) @ (sinv[..., None] * np.swapaxes(u, -1, -2))


def loglog_slope(x, y):
    """Least-squares slope of log(y) against log(x)."""
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])
