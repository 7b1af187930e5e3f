"""Dense decompositions used by the learners.

Everything here works on small matrices (a few hundred columns at most);
the only object whose row count can be large is the snapshot matrix fed
to :func:`gram_factorize`, which never forms anything of size n_y x n_y.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla


class DegenerateError(ValueError):
    """Input carries no usable information (all-zero matrix, zero direction)."""


class RankDeficiencyWarning(RuntimeWarning):
    """A pseudo-inverse or least-squares solve detected a rank drop."""


@dataclass(frozen=True)
class QRFactors:
    """``Y ~= Q @ R`` with orthonormal ``Q`` (n_y x rank) and ``R`` (rank x n_s)."""

    Q: np.ndarray
    R: np.ndarray

    @property
    def rank(self) -> int:
        return self.Q.shape[1]


@dataclass(frozen=True)
class TruncatedSVD:
    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.V.T


def _fix_signs(Q: np.ndarray) -> np.ndarray:
    """Sign vector making the largest-magnitude entry of each column positive."""
    if Q.shape[1] == 0:
        return np.ones(0)
    idx = np.argmax(np.abs(Q), axis=0)
    signs = np.sign(Q[idx, np.arange(Q.shape[1])])
    signs[signs == 0] = 1.0
    return signs


def gram_factorize(Y, rel_tol: float = 1e-12) -> QRFactors:
    """Factor the snapshot matrix through the eigenpairs of ``Y.T @ Y``.

    Eigenvalues below ``rel_tol`` times the largest are discarded. The
    columns of ``Y V / sigma`` lose orthogonality like ``eps * cond(Y)**2``,
    so one CholeskyQR pass re-orthonormalizes them; for well-conditioned
    inputs that pass changes nothing beyond round-off and ``Q`` coincides
    with the dominant left singular vectors of ``Y``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    if not np.all(np.isfinite(Y)):
        raise ValueError("Y contains non-finite entries")
    G = Y.T @ Y
    evals, V = np.linalg.eigh(G)
    order = np.argsort(evals)[::-1]
    evals, V = evals[order], V[:, order]
    if evals.size == 0 or evals[0] <= 0.0:
        raise DegenerateError("degenerate training set")
    keep = evals > rel_tol * evals[0]
    sig = np.sqrt(evals[keep])
    V = V[:, keep]
    Q = (Y @ V) / sig
    R = sig[:, None] * V.T

    # CholeskyQR second pass
    L = np.linalg.cholesky(Q.T @ Q)
    Q = sla.solve_triangular(L, Q.T, lower=True).T
    R = L.T @ R

    signs = _fix_signs(Q)
    return QRFactors(Q * signs, signs[:, None] * R)


def qr_factorize(Y) -> QRFactors:
    """Householder alternative to :func:`gram_factorize` (economic QR)."""
    Y = np.asarray(Y, dtype=np.float64)
    if not np.any(Y):
        raise DegenerateError("degenerate training set")
    Q, R = np.linalg.qr(Y, mode="reduced")
    signs = _fix_signs(Q)
    return QRFactors(Q * signs, signs[:, None] * R)


def truncated_svd(M, k: int) -> TruncatedSVD:
    """Best rank-``k`` approximation factors of ``M`` (Eckart-Young)."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError("M must be a matrix")
    if not 1 <= k <= min(M.shape):
        raise ValueError(f"k={k} outside [1, {min(M.shape)}]")
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    U, s, V = U[:, :k], s[:k], Vt[:k].T
    signs = _fix_signs(U)
    return TruncatedSVD(U * signs, s, V * signs)


def fast_rank1_coeffs(E, x_init) -> np.ndarray:
    """One alternation towards the dominant right singular vector of ``E``.

    Computes ``w = E @ x_init`` then returns ``E.T @ w`` unnormalized.
    Raises :class:`DegenerateError` when ``w`` vanishes.
    """
    E = np.asarray(E, dtype=np.float64)
    x_init = np.asarray(x_init, dtype=np.float64)
    if x_init.shape != (E.shape[1],):
        raise ValueError(f"x_init has shape {x_init.shape}, expected ({E.shape[1]},)")
    if not np.any(x_init):
        raise ValueError("x_init is identically zero")
    w = E @ x_init
    scale = np.linalg.norm(E) * np.linalg.norm(x_init)
    if scale == 0.0 or np.linalg.norm(w) <= 1e-14 * scale:
        raise DegenerateError("degenerate direction")
    return w @ E


def dominant_right_vector(E, rng: np.random.Generator, iterations: int = 50) -> np.ndarray:
    """Power iteration on ``E.T @ E`` from a random unit start."""
    E = np.asarray(E, dtype=np.float64)
    x = rng.standard_normal(E.shape[1])
    x /= np.linalg.norm(x)
    for _ in range(iterations):
        y = E.T @ (E @ x)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            raise DegenerateError("matrix is zero")
        x = y / ny
    return x


def _gram_pinv(G: np.ndarray, rel_tol: float) -> tuple[np.ndarray, int]:
    evals, V = np.linalg.eigh(G)
    top = evals.max(initial=0.0)
    if top <= 0.0:
        return np.zeros_like(G), 0
    keep = evals > rel_tol * top
    Vk = V[:, keep]
    return (Vk / evals[keep]) @ Vk.T, int(keep.sum())


def sparse_pinv(X, rel_tol: float = 1e-10, return_rank: bool = False):
    """Moore-Penrose inverse of a column-sparse coefficient matrix.

    Works on the row Gram ``X X^T``, accumulated from each column's support
    (cost ``n_s * K**2`` instead of ``n_d**2 * n_s``), restricted to the
    rows that are actually used. For full row rank ``X^+ = X^T (X X^T)^-1``;
    otherwise eigen-directions below ``rel_tol`` of the largest Gram
    eigenvalue are dropped and a :class:`RankDeficiencyWarning` is issued.

    ``X`` may be a :class:`~obsdict.sparse_coding.SparseCodeMatrix`, a scipy
    sparse matrix or a dense array. Returns a dense ``n_s x n_d`` array.
    """
    from scipy import sparse

    if hasattr(X, "to_csc"):
        Xs = X.to_csc()
    elif sparse.issparse(X):
        Xs = sparse.csc_matrix(X, dtype=np.float64)
    else:
        Xs = sparse.csc_matrix(np.asarray(X, dtype=np.float64))
    n_d, n_s = Xs.shape
    Xr = Xs.tocsr()
    used = np.flatnonzero(np.diff(Xr.indptr) > 0)
    pinv = np.zeros((n_s, n_d))
    if used.size == 0:
        return (pinv, 0) if return_rank else pinv
    Xu = Xr[used]
    G = (Xu @ Xu.T).toarray()
    Ginv, rank = _gram_pinv(G, rel_tol)
    if rank < n_d:
        warnings.warn(
            f"coefficient matrix has rank {rank} < {n_d} rows; using rank-{rank} pseudo-inverse",
            RankDeficiencyWarning,
            stacklevel=2,
        )
    pinv[:, used] = np.asarray(Xu.T @ Ginv)
    if rank == len(used):
        # one step of iterative refinement on the normal equations
        resid = np.eye(len(used)) - np.asarray(Xu @ pinv[:, used])
        pinv[:, used] += np.asarray(Xu.T @ (Ginv @ resid))
    else:
        # Newton-Schulz step P <- 2P - P X P; keeps the range, squares the error
        Pu = pinv[:, used]
        pinv[:, used] = 2.0 * Pu - Pu @ np.asarray(Xu @ Pu)
    return (pinv, rank) if return_rank else pinv

