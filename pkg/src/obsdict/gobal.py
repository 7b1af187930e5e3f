"""Observability-constrained dictionary learning.

Learns a predictor dictionary ``D`` (measurement space) together with a
QoI dictionary ``Phi = Q @ RB`` (field space) from paired training data so
that sparse codes computed from *measurements* reconstruct the *fields*.
Each outer iteration runs three steps:

* features codebook update: for randomly drawn atoms, estimate the
  coefficient row that best serves the field residual (one power-method
  alternation) and fit the predictor atom to it;
* sparse coding of every training measurement on ``D`` (OMP or SBL);
* estimation codebook update ``RB = R X^+``.

All field-space work happens on the reduced matrix ``R`` of ``Y = Q R``.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .linalg import (
    DegenerateError,
    QRFactors,
    RankDeficiencyWarning,
    dominant_right_vector,
    fast_rank1_coeffs,
    gram_factorize,
    sparse_pinv,
    truncated_svd,
)
from .matio import ModelBundle
from .observation import ObservationOperator, derive_seed, observe
from .sbl import SblHyper, SblOptions, field_posterior, sbl_solve
from .sparse_coding import SparseCodeMatrix, batch_sparse_code, omp

log = logging.getLogger(__name__)

_ZERO_ATOM = 1e-12


@dataclass
class GobalOptions:
    """Learning options.

    ``n_up`` and ``K`` default to ``n_d`` and ``n_o`` when left as ``None``.
    ``sbl_beta`` fixes the training noise precision when
    ``sbl_beta_fixed`` is set; otherwise every training column estimates
    its own. With ``sbl_beta_online`` the precision is re-estimated for
    every measurement at estimation time; without it the fixed training
    value is reused.
    """

    n_d: int
    n_up: int | None = None
    r_max: int = 100
    sc_mode: str = "omp"
    K: int | None = None
    conv_rel_tol: float = 1e-4
    conv_window: int = 10
    seed: int = 0
    sbl_beta_fixed: bool = False
    sbl_beta: float | None = None
    sbl_beta_online: bool = True
    sbl: SblOptions = field(default_factory=SblOptions)
    n_jobs: int = 1

    def __post_init__(self):
        if self.sc_mode not in ("omp", "sbl"):
            raise ValueError(f"unknown sc_mode {self.sc_mode!r}")
        if self.n_up is not None and not 1 <= self.n_up <= self.n_d:
            raise ValueError("n_up must lie in [1, n_d]")
        if self.sbl_beta_fixed and not (self.sbl_beta and self.sbl_beta > 0):
            raise ValueError("sbl_beta_fixed needs a positive sbl_beta")


@dataclass
class GobalState:
    D: np.ndarray
    RB: np.ndarray
    X: SparseCodeMatrix
    err: float
    best_D: np.ndarray
    best_RB: np.ndarray
    best_err: float
    Xd: np.ndarray | None = None  # dense copy of X, refreshed after coding
    best_X: SparseCodeMatrix | None = None

    def dense_codes(self) -> np.ndarray:
        if self.Xd is None:
            self.Xd = self.X.to_dense()
        return self.Xd


@dataclass
class GobalResult:
    bundle: ModelBundle
    factors: QRFactors
    history: list[dict]
    converged: bool


def _unit(v: np.ndarray) -> np.ndarray | None:
    n = np.linalg.norm(v)
    return None if n <= _ZERO_ATOM else v / n


def gobal_init(Y, S, C: ObservationOperator | None, opts: GobalOptions, factors: QRFactors | None = None):
    """Initial pair from the ``n_d``-truncated SVD of ``R``.

    ``RB`` holds the dominant left singular vectors scaled so that
    ``D = C Q RB`` already has unit columns; the matching right factors,
    rescaled accordingly, are the initial codes, so ``RB @ X`` is the
    truncated SVD of ``R`` exactly. ``C`` may be omitted when ``Y`` and
    ``S`` are related through an operator the caller does not have, in
    which case ``D`` is fitted by least squares ``S X^+``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if Y.shape[1] != S.shape[1]:
        raise ValueError("Y and S must have the same number of snapshots")
    n_o, n_s = S.shape
    qr = factors if factors is not None else gram_factorize(Y)
    n_d = opts.n_d
    if n_d > qr.rank:
        raise ValueError(f"n_d={n_d} exceeds the rank of the training set; achievable n_d <= {qr.rank}")
    if n_d > n_s:
        raise ValueError(f"n_d={n_d} exceeds the number of snapshots {n_s}")
    if n_o > n_d:
        log.warning("n_o=%d > n_d=%d: dictionary is not redundant", n_o, n_d)

    tsvd = truncated_svd(qr.R, n_d)
    RB = tsvd.U * tsvd.sigma
    Xd = tsvd.V.T.copy()
    if C is not None:
        D = observe(C, qr.Q @ RB)
    else:
        D = S @ np.linalg.pinv(Xd)
    norms = np.linalg.norm(D, axis=0)
    visible = norms > _ZERO_ATOM * max(norms.max(initial=0.0), 1e-300)
    RB[:, visible] /= norms[visible]
    Xd[visible] *= norms[visible, None]
    D[:, visible] /= norms[visible]
    if not np.all(visible):
        log.warning("%d initial atoms are invisible to the sensors", np.count_nonzero(~visible))
        _reseed_invisible(D, ~visible, S, np.zeros((n_d, n_s)))

    X = SparseCodeMatrix.from_dense(Xd, k_max=n_d)
    err = float(np.linalg.norm(qr.R - RB @ Xd))
    state = GobalState(D, RB, X, err, D.copy(), RB.copy(), err, Xd)
    return qr, state


def _reseed_invisible(D, mask, S, Xd):
    resid = S - D @ Xd
    norms = np.linalg.norm(resid, axis=0)
    for l in np.flatnonzero(mask):
        k = int(np.argmax(norms))
        u = _unit(resid[:, k])
        if u is None:
            u = np.zeros(D.shape[0])
            u[l % D.shape[0]] = 1.0
        D[:, l] = u
        norms[k] = -1.0


def dead_atom(D, Xd, S, l: int) -> np.ndarray:
    """Replacement atom: the normalised worst-coded measurement residual."""
    resid = S - D @ Xd
    norms = np.linalg.norm(resid, axis=0)
    for k in np.argsort(-norms, kind="stable"):
        u = _unit(resid[:, k])
        if u is not None:
            return u
    e = np.zeros(D.shape[0])
    e[l % D.shape[0]] = 1.0
    return e


def features_codebook_update(state: GobalState, R, S, n_up: int, rng: np.random.Generator) -> np.ndarray:
    """Refit ``n_up`` randomly drawn predictor atoms in place; returns ``state.D``.

    For atom ``l`` with users ``K_l``, the temporary coefficient row is one
    power-method alternation on the field residual ``E_R`` started from the
    current row; the atom becomes ``E_S @ row`` normalised. ``X`` is left
    untouched.
    """
    D, RB = state.D, state.RB
    Xd = state.dense_codes()
    n_d = D.shape[1]
    RX = RB @ Xd
    DX = D @ Xd
    for _ in range(n_up):
        l = int(rng.integers(n_d))
        users = np.flatnonzero(Xd[l])
        if users.size == 0:
            new = dead_atom(D, Xd, S, l)
        else:
            xl = Xd[l, users]
            E_R = R[:, users] - RX[:, users] + np.outer(RB[:, l], xl)
            E_S = S[:, users] - DX[:, users] + np.outer(D[:, l], xl)
            try:
                xhat = fast_rank1_coeffs(E_R, xl)
            except DegenerateError:
                try:
                    xhat = dominant_right_vector(E_R, rng)
                except DegenerateError:
                    xhat = xl
            new = _unit(E_S @ xhat)
            if new is None:
                new = dead_atom(D, Xd, S, l)
        DX += np.outer(new - D[:, l], Xd[l])
        D[:, l] = new
    return D


def estimation_codebook_update(X, R) -> np.ndarray:
    """Least-squares QoI dictionary ``RB = R X^+`` (sparse pseudo-inverse)."""
    return np.asarray(R) @ sparse_pinv(X)


def _sbl_code(D, S, opts: GobalOptions) -> SparseCodeMatrix:
    """SBL coding of every column, each from a cold start as at estimation time."""
    G = D.T @ D
    sups, vals = [], []
    for i in range(S.shape[1]):
        init = None
        if opts.sbl_beta_fixed:
            init = SblHyper(beta=opts.sbl_beta, gamma=np.zeros(D.shape[1]), lam=0.0, beta_fixed=True)
        res = sbl_solve(D, S[:, i], init=init, opts=opts.sbl, gram=G)
        sups.append(res.posterior.active)
        vals.append(res.posterior.mu)
    k_max = max((len(s) for s in sups), default=0)
    return SparseCodeMatrix(D.shape[1], S.shape[1], max(k_max, 1), sups, vals)


def sparse_code(D, S, opts: GobalOptions) -> SparseCodeMatrix:
    """Code the training measurements with OMP or SBL according to ``opts``."""
    n_o, n_d = D.shape
    if opts.sc_mode == "sbl":
        return _sbl_code(D, S, opts)
    K = min(opts.K or n_o, n_d)
    return batch_sparse_code(D, S, K, n_jobs=opts.n_jobs)


def gobal_learn(
    Y,
    S,
    C: ObservationOperator | None,
    opts: GobalOptions,
    mean_field=None,
    mean_obs=None,
    factors: QRFactors | None = None,
    callback=None,
) -> GobalResult:
    """Learn the predictor / QoI dictionary pair.

    ``Y`` and ``S`` are the centred training fields and measurements (the
    caller passes the means separately so they end up in the bundle).
    ``callback(row)`` receives each history row as it is produced.
    """
    Y = np.asarray(Y, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    qr, state = gobal_init(Y, S, C, opts, factors)
    R = qr.R
    n_o, n_d = state.D.shape
    n_up = opts.n_up or n_d
    t0 = time.perf_counter()
    # the initial codes are exact SVD factors that no measurement can deliver;
    # score the initial pair with measurement codes like every later iterate
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficiencyWarning)
        X0 = sparse_code(state.D, S, opts)
    state.best_err = float(np.linalg.norm(R - state.RB @ X0.to_dense()))
    state.best_X = X0
    history = [dict(iteration=0, epsilon=state.best_err, epsilon_best=state.best_err, seconds=time.perf_counter() - t0)]
    if callback:
        callback(history[-1])
    converged = False
    r = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficiencyWarning)
        while r < opts.r_max:
            r += 1
            rng = np.random.default_rng(derive_seed(opts.seed, r))
            features_codebook_update(state, R, S, n_up, rng)
            state.X = sparse_code(state.D, S, opts)
            state.Xd = state.X.to_dense()
            state.err = float(np.linalg.norm(R - state.RB @ state.Xd))
            if state.err < state.best_err:
                state.best_err = state.err
                state.best_D = state.D.copy()
                state.best_RB = state.RB.copy()
                state.best_X = state.X
            if np.any(state.Xd):
                state.RB = estimation_codebook_update(state.X, R)
            history.append(
                dict(iteration=r, epsilon=state.err, epsilon_best=state.best_err, seconds=time.perf_counter() - t0)
            )
            if callback:
                callback(history[-1])
            w = opts.conv_window
            if len(history) > w:
                old = history[-1 - w]["epsilon_best"]
                if old - state.best_err <= opts.conv_rel_tol * max(old, 1e-300):
                    converged = True
                    break
        # refit the QoI atoms to the codes of the best iterate: cannot raise
        # the training error, and atoms those codes never use get zero columns
        eps_final = state.best_err
        if r > 0 and np.any(state.best_X.to_dense()):
            state.best_RB = estimation_codebook_update(state.best_X, R)
            eps_final = float(np.linalg.norm(R - state.best_RB @ state.best_X.to_dense()))
    mean_field = np.zeros(Y.shape[0]) if mean_field is None else np.asarray(mean_field, dtype=np.float64)
    mean_obs = np.zeros(n_o) if mean_obs is None else np.asarray(mean_obs, dtype=np.float64)
    meta = dict(
        method="gobal",
        n_o=n_o,
        n_d=n_d,
        n_s=Y.shape[1],
        rank=qr.rank,
        seed=int(opts.seed),
        iterations=r,
        epsilon_best=state.best_err,
        epsilon_final=eps_final,
        r_norm=float(np.linalg.norm(R)),
        converged=converged,
        sc_mode=opts.sc_mode,
        K=int(min(opts.K or n_o, n_d)),
        n_up=int(n_up),
        sbl=dict(
            tol=opts.sbl.tol,
            prior_support=opts.sbl.prior_support,
            beta_bounds=list(opts.sbl.beta_bounds),
            beta_fixed=opts.sbl_beta if opts.sbl_beta_fixed else None,
            beta_online=bool(opts.sbl_beta_online or not opts.sbl_beta_fixed),
        ),
    )
    bundle = ModelBundle("gobal", state.best_D.copy(), state.best_RB.copy(), qr.Q, mean_field, mean_obs, meta)
    return GobalResult(bundle, qr, history, converged)


def assemble_physical_dictionary(bundle: ModelBundle) -> np.ndarray:
    return bundle.Q @ bundle.RB


def sbl_options_from_meta(meta: dict) -> SblOptions:
    doc = meta.get("sbl") or {}
    opts = SblOptions()
    return SblOptions(
        tol=float(doc.get("tol", opts.tol)),
        prior_support=doc.get("prior_support", opts.prior_support),
        beta_bounds=tuple(doc.get("beta_bounds", opts.beta_bounds)),
    )


def gobal_estimate(bundle: ModelBundle, s, mode: str = "deterministic", sbl_opts: SblOptions | None = None):
    """Estimate the field from measurements ``s`` (vector, or matrix of columns).

    ``deterministic`` codes the centred measurement with OMP and returns
    the field vector(s). ``map`` runs SBL and returns a list of
    ``(FieldPosterior, SblResult)`` pairs, one per measurement vector (a
    single pair for a vector input).
    """
    s = np.asarray(s, dtype=np.float64)
    vector = s.ndim == 1
    Sm = s[:, None] if vector else s
    if Sm.shape[0] != bundle.n_o:
        raise ValueError(f"measurement has {Sm.shape[0]} entries, model expects {bundle.n_o}")
    Sc = Sm - bundle.mean_obs[:, None]
    if mode in ("deterministic", "det"):
        K = int(bundle.meta.get("K", min(bundle.n_o, bundle.n_d)))
        K = min(K, bundle.n_d)
        X = batch_sparse_code(bundle.D, Sc, K).to_dense()
        Yh = bundle.Q @ (bundle.RB @ X) + bundle.mean_field[:, None]
        return Yh[:, 0] if vector else Yh
    if mode == "map":
        sbl_opts = sbl_opts or sbl_options_from_meta(bundle.meta)
        doc = bundle.meta.get("sbl", {})
        fixed = None if doc.get("beta_online", True) else doc.get("beta_fixed")
        G = bundle.D.T @ bundle.D
        out = []
        for i in range(Sc.shape[1]):
            init = None
            if fixed:
                init = SblHyper(beta=float(fixed), gamma=np.zeros(bundle.n_d), lam=0.0, beta_fixed=True)
            res = sbl_solve(bundle.D, Sc[:, i], init=init, opts=sbl_opts, gram=G)
            out.append((field_posterior(bundle, res.posterior), res))
        return out[0] if vector else out
    raise ValueError(f"unknown estimation mode {mode!r}")


def estimate_fields(bundle: ModelBundle, S, mode: str = "deterministic") -> np.ndarray:
    """Field estimates for every column of ``S`` (posterior mean in ``map`` mode)."""
    if bundle.method == "pca":
        x = np.linalg.pinv(bundle.D) @ (np.asarray(S) - bundle.mean_obs[:, None])
        return bundle.Q @ (bundle.RB @ x) + bundle.mean_field[:, None]
    if mode == "map":
        return np.column_stack([fp.mean for fp, _ in gobal_estimate(bundle, S, "map")])
    return gobal_estimate(bundle, S, "deterministic")
