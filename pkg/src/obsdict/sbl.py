"""Sparse Bayesian learning with a hierarchical Laplace prior.

Model, for a measurement vector ``s`` and dictionary ``D`` (n_o x n_d)::

    s | x      ~ N(D x, I / beta)
    x_l | g_l  ~ N(0, g_l)
    g_l | lam  ~ Exp(rate lam / 2)          density (lam/2) exp(-lam g_l / 2)
    lam | nu   ~ Gamma(shape nu/2, rate nu/2)

Integrating ``x`` out gives ``s ~ N(0, C)`` with ``C = I/beta + D G D^T``.
The objective maximised over ``(g, lam, beta)`` is::

    log N(s; 0, C) + sum_l [log(lam/2) - lam g_l / 2] + log Gamma(lam; nu/2, nu/2)

where the sum runs over every atom (``prior_support="all"``) or only over
active atoms (``prior_support="active"``).

For a single coordinate ``g_l`` with leave-one-out factors ``(s_l, q_l)``
the objective changes by::

    f(g) = 0.5 * (q_l**2 g / (1 + g s_l) - log(1 + g s_l)) - lam g / 2

whose stationary point solves ``lam u**2 + s_l u - q_l**2 = 0`` with
``u = 1 + g s_l``. A positive root exists iff ``q_l**2 - s_l > lam``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg as sla
from scipy.special import gammaln

LOG_2PI = np.log(2.0 * np.pi)


class NumericalFailure(ArithmeticError):
    """Raised for ill-conditioned posterior or marginal covariance systems."""


@dataclass
class SblHyper:
    """Hyperparameters; ``gamma[l] == 0`` marks an inactive atom."""

    beta: float
    gamma: np.ndarray
    lam: float = 1.0
    nu: float = 1e-6
    beta_fixed: bool = False

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise ValueError("beta must be finite and positive")
        if np.any(self.gamma < 0):
            raise ValueError("gamma entries must be non-negative")
        if self.lam < 0 or self.nu < 0:
            raise ValueError("lam and nu must be non-negative")

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.gamma > 0)


@dataclass
class SblPosterior:
    active: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    log_evidence: float

    def coefficients(self, n_d: int) -> np.ndarray:
        x = np.zeros(n_d)
        x[self.active] = self.mu
        return x


@dataclass
class SblOptions:
    """Stopping rule and bookkeeping for :func:`sbl_solve`.

    ``tol`` is relative to ``max(1, |objective|)``. ``beta_bounds`` are
    multiples of ``n_o / ||s||**2`` (the precision of a residual as large
    as the signal). ``trace=True`` records the full objective after every
    accepted step, which costs one extra Cholesky per step.
    """

    tol: float = 1e-8
    max_actions: int | None = None
    prior_support: str = "active"
    beta_init: float | None = None
    beta_bounds: tuple[float, float] = (1e-2, 1e10)
    trace: bool = False


@dataclass
class SblResult:
    posterior: SblPosterior
    hyper: SblHyper
    n_actions: int
    trace: list[float] = field(default_factory=list)
    actions: list[tuple[str, int]] = field(default_factory=list)


def posterior_stats(D_active, s, beta: float, gamma_active) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian coefficient posterior on the active atoms.

    ``sigma = (beta D^T D + diag(1/gamma))^-1`` and ``mu = beta sigma D^T s``.
    """
    D_active = np.asarray(D_active, dtype=np.float64)
    gamma_active = np.asarray(gamma_active, dtype=np.float64)
    if np.any(gamma_active <= 0):
        raise ValueError("active prior variances must be positive")
    A = beta * (D_active.T @ D_active) + np.diag(1.0 / gamma_active)
    if A.size and np.linalg.cond(A) > 1e12:
        raise NumericalFailure("posterior precision is ill-conditioned (cond > 1e12)")
    try:
        c = sla.cho_factor(A, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(str(exc)) from exc
    sigma = sla.cho_solve(c, np.eye(A.shape[0]))
    sigma = 0.5 * (sigma + sigma.T)
    mu = beta * sigma @ (D_active.T @ s)
    return mu, sigma


def _prior_terms(gamma: np.ndarray, lam: float, nu: float, prior_support: str) -> float:
    if prior_support == "all":
        g = gamma
    elif prior_support == "active":
        g = gamma[gamma > 0]
    else:
        raise ValueError(f"unknown prior_support {prior_support!r}")
    if lam <= 0:
        return -np.inf if g.size else _lambda_hyperprior(lam, nu)
    return g.size * np.log(lam / 2.0) - lam * g.sum() / 2.0 + _lambda_hyperprior(lam, nu)


def _lambda_hyperprior(lam: float, nu: float) -> float:
    if nu <= 0:
        return 0.0  # flat (improper) limit
    a = nu / 2.0
    if lam <= 0:
        return np.inf if a < 1 else -np.inf
    return a * np.log(a) - gammaln(a) + (a - 1.0) * np.log(lam) - a * lam


def log_gaussian_marginal(D, s, beta: float, gamma) -> float:
    """``log N(s; 0, I/beta + D diag(gamma) D^T)``."""
    D = np.asarray(D, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    act = gamma > 0
    Da = D[:, act]
    C = np.eye(D.shape[0]) / beta + (Da * gamma[act]) @ Da.T
    try:
        c = sla.cho_factor(C, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure("marginal covariance is not positive definite") from exc
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    quad = s @ sla.cho_solve(c, s)
    return -0.5 * (D.shape[0] * LOG_2PI + logdet + quad)


def log_marginal_likelihood(D, s, hyper: SblHyper, prior_support: str = "active") -> float:
    """Type-II objective: Gaussian evidence plus hyperprior log-densities."""
    return log_gaussian_marginal(D, s, hyper.beta, hyper.gamma) + _prior_terms(
        hyper.gamma, hyper.lam, hyper.nu, prior_support
    )


def optimal_gamma(s_l, q_l, lam: float):
    """Maximiser of ``f(g)`` over ``g >= 0`` (vectorised); zero when inactive."""
    s_l = np.asarray(s_l, dtype=np.float64)
    q2 = np.asarray(q_l, dtype=np.float64) ** 2
    theta = q2 - s_l
    out = np.zeros(np.broadcast(s_l, q2).shape)
    ok = (theta > lam) & (s_l > 0)
    if lam > 0:
        sl, ql = s_l[ok], q2[ok]
        disc = np.sqrt(sl * sl + 4.0 * lam * ql)
        # u - 1 = (disc - sl - 2 lam) / (2 lam), rewritten without cancellation
        num = 4.0 * lam * (ql - sl - lam)
        um1 = num / (2.0 * lam * (disc + sl + 2.0 * lam))
        out[ok] = um1 / sl
    else:
        out[ok] = theta[ok] / s_l[ok] ** 2
    return out


def gamma_gain(g, s_l, q_l, lam: float):
    """``f(g)`` for the single-coordinate objective (``f(0) == 0``)."""
    g = np.asarray(g, dtype=np.float64)
    t = 1.0 + g * s_l
    with np.errstate(invalid="ignore", divide="ignore"):
        return 0.5 * (q_l**2 * g / t - np.log(t)) - 0.5 * lam * g


def update_lambda(gamma, nu: float, prior_support: str = "active") -> float | None:
    """Closed-form maximiser of the prior terms in ``lam``.

    ``lam = (n + nu/2 - 1) / (sum(gamma)/2 + nu/2)`` with ``n`` the number
    of atoms covered by the prior. Returns ``None`` when no finite positive
    maximiser exists (no active atom).
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    n = gamma.size if prior_support == "all" else int(np.count_nonzero(gamma))
    num = n + nu / 2.0 - 1.0
    den = gamma.sum() / 2.0 + nu / 2.0
    if np.count_nonzero(gamma) == 0 or num <= 0 or den <= 0:
        return None
    return num / den


class _State:
    """Active-set posterior maintained by rank-one updates.

    The sparsity/quality factors are evaluated from a Cholesky factor of
    the ``n_o x n_o`` marginal covariance rather than through the posterior
    covariance, which avoids the cancellation in ``beta d^T d - beta^2 ...``
    once the active set nearly spans the measurement space.
    """

    def __init__(self, D, s, G, Dts, beta):
        self.D = D
        self.s = s
        self.G = G
        self.Dts = Dts
        self.beta = beta
        self.active: list[int] = []
        self.sigma = np.zeros((0, 0))
        self.mu = np.zeros(0)

    def factors(self, gamma):
        """Sparsity/quality factors ``S_l = d^T C^-1 d``, ``Q_l = d^T C^-1 s``."""
        b = self.beta
        if not self.active:
            return b * np.diag(self.G).copy(), b * self.Dts.copy()
        Da = self.D[:, self.active]
        C = (Da * gamma[self.active]) @ Da.T
        C[np.diag_indices_from(C)] += 1.0 / b
        try:
            L = np.linalg.cholesky(C)
        except np.linalg.LinAlgError as exc:
            raise NumericalFailure("marginal covariance is not positive definite") from exc
        W = sla.solve_triangular(L, np.column_stack([self.D, self.s]), lower=True, check_finite=False)
        S = np.einsum("ij,ij->j", W[:, :-1], W[:, :-1])
        Q = W[:, :-1].T @ W[:, -1]
        return S, Q

    def refresh(self, gamma):
        if not self.active:
            self.sigma, self.mu = np.zeros((0, 0)), np.zeros(0)
            return
        a = self.active
        A = self.beta * self.G[np.ix_(a, a)] + np.diag(1.0 / gamma[a])
        Li = np.linalg.inv(np.linalg.cholesky(A))
        self.sigma = Li.T @ Li
        self.mu = self.beta * self.sigma @ self.Dts[a]

    def add(self, l, g_new, S_l, Q_l):
        s_ll = 1.0 / (1.0 / g_new + S_l)
        mu_l = s_ll * Q_l
        if self.active:
            e = self.beta * (self.sigma @ self.G[self.active, l])
            top = self.sigma + s_ll * np.outer(e, e)
            self.sigma = np.block([[top, -s_ll * e[:, None]], [-s_ll * e[None, :], np.array([[s_ll]])]])
            self.mu = np.append(self.mu - mu_l * e, mu_l)
        else:
            self.sigma = np.array([[s_ll]])
            self.mu = np.array([mu_l])
        self.active.append(l)

    def reestimate(self, j, g_old, g_new):
        delta = 1.0 / g_new - 1.0 / g_old
        if delta == 0.0:
            return
        kappa = 1.0 / (self.sigma[j, j] + 1.0 / delta)
        col = self.sigma[:, j].copy()
        self.sigma = self.sigma - kappa * np.outer(col, col)
        self.mu = self.mu - kappa * self.mu[j] * col

    def delete(self, j):
        col = self.sigma[:, j].copy()
        sjj = col[j]
        self.sigma = self.sigma - np.outer(col, col) / sjj
        self.mu = self.mu - self.mu[j] * col / sjj
        keep = np.arange(len(self.active)) != j
        self.sigma = self.sigma[np.ix_(keep, keep)]
        self.mu = self.mu[keep]
        del self.active[j]


def _update_beta(state: _State, gamma, s, ss, n_o, bounds, max_iter=100, rtol=1e-11) -> float:
    """Solve the evidence stationarity condition for ``beta``.

    ``beta = (n_o - sum_l (1 - sigma_ll / g_l)) / ||s - D mu||**2``. With the
    thin SVD ``D_a g^1/2 = U diag(sqrt(e)) V^T`` and ``u = U^T s``::

        dof(beta) = sum beta e / t,   rss(beta) = r_perp + sum u**2 / t**2,

    where ``t = 1 + beta e`` and ``r_perp`` is the part of ``||s||**2``
    outside the span of the active atoms; neither expression cancels. The
    root of ``n_o - dof - beta * rss`` is found by Newton steps in
    ``log(beta)`` started from the current value.
    """
    lo, hi = bounds
    beta = state.beta
    a = state.active
    if a:
        U, sv, _ = np.linalg.svd(state.D[:, a] * np.sqrt(gamma[a]), full_matrices=False)
        e = sv * sv
        u = U.T @ s
        r_perp = float(np.sum((s - U @ u) ** 2))
        u2 = u * u
    else:
        e = u2 = np.zeros(0)
        r_perp = ss
    for _ in range(max_iter):
        t = beta * e + 1.0
        dof = float(np.sum(beta * e / t))
        rss = r_perp + float(np.sum(u2 / (t * t)))
        g = n_o - dof - beta * rss
        if abs(g) <= 1e-12 * n_o:
            break
        drss = -2.0 * float(np.sum(u2 * e / t**3))
        dg = -float(np.sum(e / (t * t))) - rss - beta * drss
        step = -g / (beta * dg) if dg < 0 else (2.0 if g > 0 else -2.0)
        step = min(max(step, -2.0), 2.0)
        new = min(max(beta * np.exp(step), lo), hi)
        if abs(new - beta) <= rtol * beta:
            beta = new
            break
        beta = new
    state.beta = beta
    state.refresh(gamma)
    return beta


def sbl_solve(D, s, init: SblHyper | None = None, opts: SblOptions | None = None, gram=None) -> SblResult:
    """Sequential type-II evidence maximisation (fast marginal likelihood).

    Starting from the empty model, each step evaluates, for every atom, the
    best single-coordinate action on its prior variance (add, re-estimate,
    delete) from leave-one-out sparsity/quality factors and applies the one
    with the largest objective gain. ``lam`` is then set to its closed-form
    maximiser and, unless fixed, ``beta`` is re-estimated. Iteration stops
    when the best gain falls below ``opts.tol`` (relative).
    """
    opts = opts or SblOptions()
    D = np.asarray(D, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    n_o, n_d = D.shape
    if s.shape != (n_o,):
        raise ValueError(f"s has shape {s.shape}, expected ({n_o},)")
    G = D.T @ D if gram is None else gram
    ss = float(s @ s)

    if init is None:
        beta0 = opts.beta_init if opts.beta_init is not None else (100.0 * n_o / ss if ss > 0 else 1.0)
        hyper = SblHyper(beta=beta0, gamma=np.zeros(n_d), lam=0.0)
    else:
        hyper = replace(init, gamma=np.array(init.gamma, dtype=np.float64))
        if hyper.gamma.shape != (n_d,):
            raise ValueError("init.gamma has the wrong length")

    if ss == 0.0:
        post = SblPosterior(np.zeros(0, dtype=int), np.zeros(0), np.zeros((0, 0)), 0.0)
        hyper.gamma[:] = 0.0
        post.log_evidence = log_marginal_likelihood(D, s, hyper, opts.prior_support) if hyper.lam > 0 else -np.inf
        return SblResult(post, hyper, 0)

    scale = n_o / ss
    bounds = (opts.beta_bounds[0] * scale, opts.beta_bounds[1] * scale)
    if not hyper.beta_fixed:
        hyper.beta = min(max(hyper.beta, bounds[0]), bounds[1])
    state = _State(D, s, G, D.T @ s, hyper.beta)
    gamma = hyper.gamma
    state.active = [int(l) for l in np.flatnonzero(gamma > 0)]
    state.refresh(gamma)
    jump_active = opts.prior_support == "active"
    max_actions = opts.max_actions if opts.max_actions is not None else 10 * n_d + 20

    result = SblResult(None, hyper, 0)

    def objective():
        return log_marginal_likelihood(D, s, SblHyper(state.beta, gamma, hyper.lam, hyper.nu), opts.prior_support)

    if not state.active:
        # seed with the atom that best explains s (no shrinkage), then fix lam
        S, Q = state.factors(gamma)
        g0 = optimal_gamma(S, Q, 0.0)
        if not np.any(g0 > 0):
            post = SblPosterior(np.zeros(0, dtype=int), np.zeros(0), np.zeros((0, 0)), -np.inf)
            return SblResult(post, hyper, 0)
        l0 = int(np.argmax(gamma_gain(g0, S, Q, 0.0)))
        gamma[l0] = g0[l0]
        state.add(l0, g0[l0], S[l0], Q[l0])
        result.actions.append(("init", l0))
        lam = update_lambda(gamma, hyper.nu, opts.prior_support)
        hyper.lam = lam if lam is not None else hyper.lam
    if opts.trace:
        result.trace.append(objective())

    n_actions = 0
    while n_actions < max_actions:
        S, Q = state.factors(gamma)
        s_l, q_l = S.copy(), Q.copy()
        act = np.array(state.active, dtype=int)
        if act.size:
            denom = 1.0 - gamma[act] * S[act]
            s_l[act] = S[act] / denom
            q_l[act] = Q[act] / denom
        lam = hyper.lam
        g_new = optimal_gamma(s_l, q_l, lam)
        g_new[np.abs(q_l) <= 1e-12 * np.sqrt(max(s_l.max(), 1e-300) * 1.0)] = 0.0
        is_active = gamma > 0
        jump = np.log(lam / 2.0) if (jump_active and lam > 0) else 0.0
        f_old = np.where(is_active, gamma_gain(gamma, s_l, q_l, lam), 0.0)
        f_new = np.where(g_new > 0, gamma_gain(g_new, s_l, q_l, lam), 0.0)
        gain = f_new - f_old
        gain += jump * ((g_new > 0) & ~is_active) - jump * ((g_new == 0) & is_active)
        # 0 = delete, 1 = re-estimate, 2 = add, 3 = nothing
        kind = np.full(n_d, 3)
        kind[is_active & (g_new == 0)] = 0
        kind[is_active & (g_new > 0)] = 1
        kind[~is_active & (g_new > 0)] = 2
        gain[(kind == 3) | np.isnan(gain)] = -np.inf
        best_gain = gain.max()
        L_scale = max(1.0, abs(result.trace[-1])) if result.trace else max(1.0, 0.5 * n_o)
        if not np.isfinite(best_gain) or best_gain <= opts.tol * L_scale:
            break
        cands = np.flatnonzero(gain == best_gain)
        l = int(cands[np.lexsort((cands, kind[cands]))[0]])
        if kind[l] == 2:
            state.add(l, g_new[l], S[l], Q[l])
            gamma[l] = g_new[l]
            result.actions.append(("add", l))
        elif kind[l] == 1:
            j = state.active.index(l)
            state.reestimate(j, gamma[l], g_new[l])
            gamma[l] = g_new[l]
            result.actions.append(("reestimate", l))
        else:
            state.delete(state.active.index(l))
            gamma[l] = 0.0
            result.actions.append(("delete", l))
        n_actions += 1
        if opts.trace:
            result.trace.append(objective())

        lam = update_lambda(gamma, hyper.nu, opts.prior_support)
        if lam is not None:
            hyper.lam = lam
        if not hyper.beta_fixed:
            _update_beta(state, gamma, s, ss, n_o, bounds)
        if opts.trace and (lam is not None or not hyper.beta_fixed):
            result.trace.append(objective())
        if not state.active:
            break

    hyper.beta = state.beta
    active = np.sort(np.array(state.active, dtype=int))
    # final posterior from scratch, free of accumulated rank-one update drift
    mu, sigma = posterior_stats(D[:, active], s, state.beta, gamma[active])
    post = SblPosterior(active, mu, sigma, objective() if active.size else -np.inf)
    result.posterior = post
    result.hyper = hyper
    result.n_actions = n_actions
    return result


@dataclass
class FieldPosterior:
    mean: np.ndarray
    coeff_cov: np.ndarray
    diag_std: np.ndarray


def field_posterior(bundle, post: SblPosterior) -> FieldPosterior:
    """Gaussian field estimate ``N(Phi mu, Phi Sigma Phi^T)`` with ``Phi = Q RB``.

    Only the pointwise standard deviation is formed, as the row norms of
    ``Phi_active @ chol(Sigma)``.
    """
    a = post.active
    mean = np.array(bundle.mean_field, dtype=np.float64, copy=True)
    if a.size == 0:
        return FieldPosterior(mean, post.sigma, np.zeros_like(mean))
    phi = bundle.Q @ bundle.RB[:, a]
    mean = mean + phi @ post.mu
    try:
        Lc = np.linalg.cholesky(post.sigma)
        diag_std = np.linalg.norm(phi @ Lc, axis=1)
    except np.linalg.LinAlgError:
        var = np.einsum("ij,ij->i", phi @ post.sigma, phi)
        diag_std = np.sqrt(np.clip(var, 0.0, None))
    return FieldPosterior(mean, post.sigma, diag_std)


def soft_threshold(z: float, t: float) -> float:
    return float(np.sign(z) * max(abs(z) - t, 0.0))


def bpdn_scalar(d, s, rho: float) -> float:
    """Closed-form minimiser of ``||s - d x||^2 + rho |x|`` for one atom ``d``."""
    d = np.asarray(d, dtype=np.float64)
    dd = d @ d
    return soft_threshold(float(d @ s) / dd, rho / (2.0 * dd))
