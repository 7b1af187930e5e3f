"""Reference estimators: PCA/POD with a pseudo-inverse lift-up, and K-SVD."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .linalg import QRFactors, gram_factorize
from .matio import ModelBundle
from .observation import ObservationOperator, observe
from .sparse_coding import batch_sparse_code, omp

log = logging.getLogger(__name__)


class RankError(ValueError):
    """Requested more modes than the training set supports."""

    def __init__(self, message: str, rank: int):
        super().__init__(message)
        self.rank = rank


class UnobservableError(ArithmeticError):
    """The dictionary is invisible through the observation operator."""


@dataclass
class PcaModel:
    modes: np.ndarray
    mean_field: np.ndarray


@dataclass
class KsvdModel:
    dictionary: np.ndarray
    K: int
    mean_field: np.ndarray | None = None
    errors: list[float] = field(default_factory=list)


def pca_learn(Y, n_d: int, mean_field=None, factors: QRFactors | None = None) -> PcaModel:
    """Dominant ``n_d`` empirical modes of the (centred) snapshot matrix.

    Computed from the small ``n_s x n_s`` eigenproblem on ``Y^T Y``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    qr = factors if factors is not None else gram_factorize(Y)
    if n_d > qr.rank:
        raise RankError(f"n_d={n_d} exceeds the numerical rank {qr.rank} of the training set", qr.rank)
    if mean_field is None:
        mean_field = np.zeros(Y.shape[0])
    return PcaModel(qr.Q[:, :n_d].copy(), np.asarray(mean_field, dtype=np.float64))


def pca_estimate(model: PcaModel, C: ObservationOperator, s) -> np.ndarray:
    """Minimum-norm data-misfit estimate ``mean + Phi (C Phi)^+ s``.

    ``s`` may hold several measurement vectors as columns.
    """
    CPhi = observe(C, model.modes)
    if not np.any(np.abs(CPhi) > 1e-14 * max(1.0, np.abs(model.modes).max())):
        raise UnobservableError("dictionary not observable from sensors")
    s = np.asarray(s, dtype=np.float64)
    x = np.linalg.pinv(CPhi) @ s
    y = model.modes @ x
    return y + (model.mean_field[:, None] if y.ndim == 2 else model.mean_field)


def _normalize_columns(A: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(A, axis=0)
    norms[norms == 0] = 1.0
    return A / norms


def ksvd_learn(
    Y,
    n_d: int,
    K: int,
    iterations: int = 50,
    seed: int = 0,
    rel_tol: float = 1e-5,
    mean_field=None,
    factors: QRFactors | None = None,
) -> KsvdModel:
    """K-SVD dictionary learning initialised with normalised PCA modes.

    Runs in the reduced coordinates ``R`` of ``Y = Q R``; because ``Q`` is
    orthonormal, inner products, norms and rank-one SVDs are the same as in
    field space and the learned atoms are mapped back through ``Q``.

    The best iterate (smallest ``||Y - Phi X||_F`` after sparse coding) is
    returned; iteration stops early when the relative change of the
    training error drops below ``rel_tol``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    qr = factors if factors is not None else gram_factorize(Y)
    n_s = Y.shape[1]
    if not K <= n_d <= n_s:
        raise ValueError(f"need K <= n_d <= n_s, got K={K}, n_d={n_d}, n_s={n_s}")
    if n_d > qr.rank:
        raise RankError(f"n_d={n_d} exceeds the numerical rank {qr.rank} of the training set", qr.rank)
    R = qr.R
    Phi = np.zeros((qr.rank, n_d))
    Phi[np.arange(n_d), np.arange(n_d)] = 1.0  # PCA modes in reduced coordinates
    mean_field = np.zeros(Y.shape[0]) if mean_field is None else np.asarray(mean_field, dtype=np.float64)
    rng = np.random.default_rng(seed)

    best_err = np.inf
    best = Phi.copy()
    errors: list[float] = []
    prev = None
    for it in range(iterations):
        X = batch_sparse_code(Phi, R, K).to_dense()
        E = R - Phi @ X
        err = float(np.linalg.norm(E))
        errors.append(err)
        if err < best_err:
            best_err, best = err, Phi.copy()
        if prev is not None and abs(prev - err) <= rel_tol * max(prev, 1e-300):
            break
        prev = err
        for l in rng.permutation(n_d):
            users = np.flatnonzero(X[l])
            if users.size == 0:
                worst = int(np.argmax(np.linalg.norm(E, axis=0)))
                col = E[:, worst]
                nrm = np.linalg.norm(col)
                if nrm > 0:
                    Phi[:, l] = col / nrm
                log.debug("ksvd: atom %d unused at iteration %d, re-seeded", l, it)
                continue
            Ek = E[:, users] + np.outer(Phi[:, l], X[l, users])
            U, sv, Vt = np.linalg.svd(Ek, full_matrices=False)
            Phi[:, l] = U[:, 0]
            X[l, users] = sv[0] * Vt[0]
            E[:, users] = Ek - np.outer(Phi[:, l], X[l, users])
    if iterations > 0:
        X = batch_sparse_code(Phi, R, K).to_dense()
        err = float(np.linalg.norm(R - Phi @ X))
        errors.append(err)
        if err < best_err:
            best_err, best = err, Phi.copy()
    return KsvdModel(qr.Q @ best, K, mean_field, errors)


def ksvd_estimate(model: KsvdModel, C: ObservationOperator, s, K: int | None = None) -> np.ndarray:
    """Sparse-coding estimate on the observed dictionary ``C Phi``.

    Columns of ``C Phi`` are normalised for OMP and the scales folded back
    into the coefficients; atoms with a numerically zero footprint on the
    sensors are excluded.
    """
    K = model.K if K is None else K
    if K > C.n_obs:
        raise ValueError(f"K={K} exceeds the number of sensors {C.n_obs}")
    D, scale, keep = _observed_dictionary(model.dictionary, C)
    s = np.asarray(s, dtype=np.float64)
    vector = s.ndim == 1
    S = s[:, None] if vector else s
    K = min(K, D.shape[1])
    X = batch_sparse_code(D, S, K).to_dense() / scale[:, None]
    Y = model.dictionary[:, keep] @ X
    mean = model.mean_field if model.mean_field is not None else 0.0
    Y = Y + (np.asarray(mean)[:, None] if np.ndim(mean) else mean)
    return Y[:, 0] if vector else Y


def _observed_dictionary(Phi, C):
    CPhi = observe(C, Phi)
    norms = np.linalg.norm(CPhi, axis=0)
    keep = norms > 1e-12 * max(norms.max(initial=0.0), 1e-300)
    if not np.any(keep):
        raise UnobservableError("dictionary not observable from sensors")
    excluded = np.flatnonzero(~keep)
    if excluded.size:
        log.info("atoms %s are invisible to the sensors and excluded", excluded.tolist())
    return CPhi[:, keep] / norms[keep], norms[keep], keep


def pca_bundle(model: PcaModel, C: ObservationOperator, mean_obs=None, meta=None) -> ModelBundle:
    n_d = model.modes.shape[1]
    D = observe(C, model.modes)
    mean_obs = observe(C, model.mean_field) if mean_obs is None else np.asarray(mean_obs)
    return ModelBundle("pca", D, np.eye(n_d), model.modes.copy(), model.mean_field.copy(), mean_obs, dict(meta or {}))


def ksvd_bundle(model: KsvdModel, C: ObservationOperator, mean_obs=None, meta=None) -> ModelBundle:
    """Bundle with unit-norm ``D = C Phi diag(1/scale)`` and ``Q RB = Phi diag(1/scale)``.

    Atoms invisible to the sensors are dropped.
    """
    D, scale, keep = _observed_dictionary(model.dictionary, C)
    Phi = model.dictionary[:, keep] / scale
    Q, Rf = np.linalg.qr(Phi)
    mean_field = model.mean_field if model.mean_field is not None else np.zeros(Phi.shape[0])
    mean_obs = observe(C, mean_field) if mean_obs is None else np.asarray(mean_obs)
    meta = dict(meta or {})
    meta.update(K=int(model.K), n_excluded=int(np.count_nonzero(~keep)))
    return ModelBundle("ksvd", D, Rf, Q, np.asarray(mean_field, dtype=np.float64), mean_obs, meta)
