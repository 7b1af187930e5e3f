"""Greedy sparse coding (Cholesky-updated OMP) and column-sparse code storage."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import sparse
from scipy.linalg import solve_triangular

from .linalg import RankDeficiencyWarning

# squared sine of the smallest angle an incoming atom may make with the span
# of the current support before OMP declares a stall
_INDEPENDENCE_TOL = 1e-10


@dataclass
class OpCounter:
    """Floating-point operation tally (a dense ``m x n`` matvec counts ``2 m n``)."""

    flops: int = 0

    def add(self, n: int) -> None:
        self.flops += int(n)


class OmpResult(NamedTuple):
    support: np.ndarray
    coeffs: np.ndarray
    residual_norm: float
    stalled: bool


@dataclass
class SparseCodeMatrix:
    """Column-sparse ``n_rows x n_cols`` matrix of codes.

    Column ``i`` stores a sorted support ``supports[i]`` and the matching
    ``values[i]``. ``k_max`` bounds every support size.
    """

    n_rows: int
    n_cols: int
    k_max: int
    supports: list[np.ndarray] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)
    stalled: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self):
        if len(self.supports) != self.n_cols or len(self.values) != self.n_cols:
            raise ValueError("need one support and one value vector per column")
        if self.stalled.shape != (self.n_cols,):
            self.stalled = np.zeros(self.n_cols, dtype=bool)
        for sup, val in zip(self.supports, self.values):
            if len(sup) > self.k_max:
                raise ValueError(f"support of size {len(sup)} exceeds k_max={self.k_max}")
            if len(sup) != len(val):
                raise ValueError("support/value length mismatch")
            if len(sup) > 1 and np.any(np.diff(sup) <= 0):
                raise ValueError("supports must be strictly increasing")

    @classmethod
    def from_dense(cls, X, k_max: int | None = None) -> "SparseCodeMatrix":
        X = np.asarray(X, dtype=np.float64)
        sups = [np.flatnonzero(X[:, i]) for i in range(X.shape[1])]
        vals = [X[s, i] for i, s in enumerate(sups)]
        if k_max is None:
            k_max = max((len(s) for s in sups), default=0)
        return cls(X.shape[0], X.shape[1], k_max, sups, vals)

    def to_csc(self) -> sparse.csc_matrix:
        indptr = np.zeros(self.n_cols + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(s) for s in self.supports])
        idx = np.concatenate(self.supports) if self.n_cols else np.zeros(0, dtype=np.int64)
        data = np.concatenate(self.values) if self.n_cols else np.zeros(0)
        return sparse.csc_matrix((data, idx, indptr), shape=(self.n_rows, self.n_cols))

    def to_dense(self) -> np.ndarray:
        X = np.zeros((self.n_rows, self.n_cols))
        for i, (s, v) in enumerate(zip(self.supports, self.values)):
            X[s, i] = v
        return X

    @property
    def cardinalities(self) -> np.ndarray:
        return np.array([len(s) for s in self.supports], dtype=int)


def check_unit_columns(D: np.ndarray, tol: float = 1e-8) -> None:
    norms = np.linalg.norm(D, axis=0)
    bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
    if bad.size:
        raise ValueError(f"dictionary columns {bad[:5].tolist()} are not unit norm")


def restricted_lsq(A, s, support) -> np.ndarray:
    """Least-squares coefficients of ``s`` on the columns ``A[:, support]``.

    A rank-deficient restriction yields the minimum-norm solution and a
    :class:`RankDeficiencyWarning`.
    """
    A = np.asarray(A, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    support = np.asarray(support, dtype=int)
    if support.size == 0:
        return np.zeros(0)
    if len(set(support.tolist())) != support.size:
        raise ValueError("support indices must be distinct")
    if support.min() < 0 or support.max() >= A.shape[1]:
        raise ValueError("support index out of range")
    As = A[:, support]
    coeffs, _, rank, _ = np.linalg.lstsq(As, s, rcond=None)
    if rank < support.size:
        warnings.warn(f"restricted system has rank {rank} < {support.size}", RankDeficiencyWarning, stacklevel=2)
    return coeffs


def omp(
    D, s, K: int, res_tol: float = 1e-12, gram=None, check_norms: bool = True, ops: OpCounter | None = None
) -> OmpResult:
    """Orthogonal Matching Pursuit with a rank-one-updated Cholesky factor.

    Parameters
    ----------
    D : ndarray, shape (n, p)
        Dictionary with unit-norm columns.
    s : ndarray, shape (n,)
        Signal to code.
    K : int
        Maximum number of atoms.
    res_tol : float
        Stop once ``||residual|| <= res_tol * ||s||``.
    gram : ndarray, optional
        Precomputed ``D.T @ D``; correlations are updated through it.
    ops : OpCounter, optional
        Incremented with the arithmetic performed for this signal.

    Returns
    -------
    OmpResult
        Sorted support, matching coefficients, residual norm and a flag set
        when the greedy step re-selected an atom or hit a dependent atom.
    """
    D = np.asarray(D, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    n, p = D.shape
    if s.shape != (n,):
        raise ValueError(f"signal has shape {s.shape}, dictionary expects ({n},)")
    if not 1 <= K <= p:
        raise ValueError(f"K={K} outside [1, {p}]")
    if check_norms:
        check_unit_columns(D)
    G = D.T @ D if gram is None else gram

    alpha = D.T @ s
    if ops is not None:
        ops.add(2 * n * p)
    s_norm = float(np.linalg.norm(s))
    target = res_tol * s_norm
    if s_norm <= target or s_norm == 0.0:
        return OmpResult(np.zeros(0, dtype=int), np.zeros(0), s_norm, False)

    L = np.zeros((K, K))
    support: list[int] = []
    in_support = np.zeros(p, dtype=bool)
    x = np.zeros(0)
    res_norm = s_norm
    stalled = False
    corr = alpha
    for k in range(K):
        j = int(np.argmax(np.abs(corr)))
        if in_support[j]:
            stalled = True
            break
        if k == 0:
            L[0, 0] = np.sqrt(G[j, j])
        else:
            w = solve_triangular(L[:k, :k], G[support, j], lower=True, check_finite=False)
            d = G[j, j] - w @ w
            if d <= _INDEPENDENCE_TOL:
                stalled = True
                break
            L[k, :k] = w
            L[k, k] = np.sqrt(d)
        support.append(j)
        in_support[j] = True
        Lk = L[: k + 1, : k + 1]
        z = solve_triangular(Lk, alpha[support], lower=True, check_finite=False)
        x = solve_triangular(Lk.T, z, lower=False, check_finite=False)
        r = s - D[:, support] @ x
        new_norm = float(np.linalg.norm(r))
        if ops is not None:
            # argmax, three triangular solves, residual
            ops.add(p + 3 * (k + 1) ** 2 + 2 * n * (k + 1) + 2 * n)
        assert new_norm <= res_norm * (1 + 1e-9) + 1e-14 * s_norm, "OMP residual increased"
        res_norm = new_norm
        if res_norm <= target:
            break
        corr = alpha - G[:, support] @ x
        if ops is not None:
            ops.add(2 * p * (k + 1) + p)

    order = np.argsort(support)
    return OmpResult(np.asarray(support, dtype=int)[order], x[order], res_norm, stalled)


def _code_columns(D, S, cols, K, res_tol, G, ops=None):
    return [omp(D, S[:, i], K, res_tol, gram=G, check_norms=False, ops=ops) for i in cols]


def batch_sparse_code(
    D, S, K: int, res_tol: float = 1e-12, n_jobs: int = 1, ops: OpCounter | None = None
) -> SparseCodeMatrix:
    """Code every column of ``S`` with :func:`omp`.

    Columns are independent; with ``n_jobs > 1`` they are split into
    contiguous chunks processed by joblib workers. Each column goes through
    exactly the same arithmetic either way, so the result is identical.
    Operation counting (``ops``) is only supported serially.
    """
    D = np.asarray(D, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if S.ndim == 1:
        S = S[:, None]
    if S.shape[0] != D.shape[0]:
        raise ValueError(f"S has {S.shape[0]} rows, dictionary has {D.shape[0]}")
    check_unit_columns(D)
    n_s = S.shape[1]
    G = D.T @ D
    if ops is not None:
        ops.add(2 * D.shape[0] * D.shape[1] ** 2)
    if n_jobs == 1 or n_s < 2 * n_jobs or ops is not None:
        results = _code_columns(D, S, range(n_s), K, res_tol, G, ops)
    else:
        from joblib import Parallel, delayed

        chunks = np.array_split(np.arange(n_s), n_jobs)
        parts = Parallel(n_jobs=n_jobs)(delayed(_code_columns)(D, S, c, K, res_tol, G) for c in chunks)
        results = [r for part in parts for r in part]
    return SparseCodeMatrix(
        D.shape[1],
        n_s,
        K,
        [r.support for r in results],
        [r.coeffs for r in results],
        np.array([r.stalled for r in results], dtype=bool),
    )
