"""Synthetic benchmark: random-field ensembles, wall sensors, sweeps, cost model.

Fields live on an ``nx x ny`` grid flattened row-major, ``index = ix * ny + iy``.
They are finite Karhunen-Loeve sums of orthonormal separable modes with
variances ``l**-decay``: cosines in ``x`` times sines in ``y`` that vanish
just outside the ``iy = 0`` and ``iy = ny - 1`` rows, so every mode has a
non-zero wall-normal gradient. Sensors are one-sided wall-normal
differences at those two walls.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .baselines import ksvd_bundle, ksvd_learn, pca_bundle, pca_learn
from .gobal import GobalOptions, estimate_fields, gobal_learn
from .linalg import gram_factorize
from .matio import _atomic_write
from .observation import NoiseSpec, ObservationOperator, apply_noise, derive_seed, observe, one_sided_derivative
from .sbl import SblOptions
from .sparse_coding import OpCounter, batch_sparse_code

log = logging.getLogger(__name__)

METHODS = ("pca", "ksvd", "gobal-omp", "gobal-sbl")
CSV_HEADER = ("method", "n_d", "n_o", "delta_train", "delta_test", "epsilon", "seconds")


@dataclass(frozen=True)
class SyntheticSpec:
    grid: tuple[int, int] = (32, 24)
    n_modes: int = 100
    decay: float = 1.5
    coeff_law: str = "gaussian"
    seed: int = 0

    def __post_init__(self):
        nx, ny = self.grid
        if nx < 2 or ny < 2:
            raise ValueError("grid needs at least 2 nodes per direction")
        if not 1 <= self.n_modes <= nx * ny:
            raise ValueError("n_modes must lie in [1, nx*ny]")
        if not self.decay > 0:
            raise ValueError("decay must be positive")
        if self.coeff_law not in ("gaussian", "uniform"):
            raise ValueError(f"unknown coeff_law {self.coeff_law!r}")

    @property
    def n_field(self) -> int:
        return self.grid[0] * self.grid[1]


def _cosine_basis(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    B = np.cos(np.pi * np.outer(i, np.arange(n)) / n) * np.sqrt(2.0 / n)
    B[:, 0] = 1.0 / np.sqrt(n)
    return B


def _sine_basis(n: int) -> np.ndarray:
    j = np.arange(1, n + 1)
    return np.sqrt(2.0 / (n + 1)) * np.sin(np.pi * np.outer(j, j) / (n + 1))


def field_modes(grid: tuple[int, int], n_modes: int) -> np.ndarray:
    """First ``n_modes`` separable modes ordered by total wavenumber ``p + q``."""
    nx, ny = grid
    Bx = _cosine_basis(nx)
    By = _sine_basis(ny)
    pairs = sorted((p + q + 1, p, q) for p in range(nx) for q in range(ny))[:n_modes]
    return np.column_stack([np.kron(Bx[:, p], By[:, q]) for _, p, q in pairs])


def synth_ensemble(spec: SyntheticSpec, n_s: int, stream: int = 0) -> np.ndarray:
    """``n_y x n_s`` snapshots ``sum_l l**(-decay/2) phi_l xi_l``.

    ``stream`` selects an independent coefficient stream for the same spec.
    """
    phi = field_modes(spec.grid, spec.n_modes)
    rng = np.random.default_rng(derive_seed(spec.seed, stream))
    if spec.coeff_law == "gaussian":
        xi = rng.standard_normal((spec.n_modes, n_s))
    else:
        xi = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), (spec.n_modes, n_s))
    std = np.arange(1, spec.n_modes + 1, dtype=np.float64) ** (-spec.decay / 2.0)
    return phi @ (std[:, None] * xi)


def wall_sensor_library(grid: tuple[int, int]) -> list[tuple[tuple[int, float], tuple[int, float]]]:
    """Candidate wall-normal difference stencils, bottom wall first then top."""
    nx, ny = grid
    h = 1.0 / ny
    out = [one_sided_derivative(ix * ny, ix * ny + 1, h) for ix in range(nx)]
    out += [one_sided_derivative(ix * ny + ny - 1, ix * ny + ny - 2, h) for ix in range(nx)]
    return out


def sensor_operator(grid, chosen: Sequence[int]) -> ObservationOperator:
    lib = wall_sensor_library(grid)
    return ObservationOperator(grid[0] * grid[1], tuple(tuple(lib[i]) for i in chosen))


def recerr(Y_hat, Y_true) -> float:
    """Relative Frobenius error ``||Y_true - Y_hat|| / ||Y_true||``."""
    Y_hat = np.asarray(Y_hat, dtype=np.float64)
    Y_true = np.asarray(Y_true, dtype=np.float64)
    if Y_hat.shape != Y_true.shape:
        raise ValueError(f"shape mismatch {Y_hat.shape} vs {Y_true.shape}")
    nt = np.linalg.norm(Y_true)
    if nt == 0:
        raise ValueError("reference has zero norm")
    return float(np.linalg.norm(Y_true - Y_hat) / nt)


@dataclass
class SensorSearch:
    best: tuple[int, ...]
    epsilon: float
    tried: list[tuple[int, ...]]
    epsilons: list[float]


def random_index_sets(pool: int, n_o: int, count: int, seed: int) -> list[tuple[int, ...]]:
    """``count`` sorted index sets of size ``n_o`` drawn uniformly from ``range(pool)``."""
    if n_o > pool:
        raise ValueError(f"cannot pick {n_o} sensors from {pool} candidates")
    rng = np.random.default_rng(seed)
    return [tuple(sorted(rng.choice(pool, n_o, replace=False).tolist())) for _ in range(count)]


def select_sensors_random_best(
    candidates: Sequence[Sequence[int]], evaluate: Callable[[tuple[int, ...]], float], trials: int, seed: int
) -> SensorSearch:
    """Evaluate ``trials`` candidate sets drawn without replacement; keep the best.

    ``evaluate`` returns a recovery error; non-finite values (or raised
    arithmetic/value errors) count as failures and are never preferred
    over a finite alternative.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if not candidates:
        raise ValueError("no candidate sets")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(candidates))[: min(trials, len(candidates))]
    tried, eps = [], []
    for k in order:
        cand = tuple(int(i) for i in candidates[k])
        try:
            e = float(evaluate(cand))
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            log.info("sensor set %s failed: %s", cand, exc)
            e = math.nan
        tried.append(cand)
        eps.append(e)
    key = [e if np.isfinite(e) else np.inf for e in eps]
    b = int(np.argmin(key))
    return SensorSearch(tried[b], eps[b], tried, eps)


@dataclass
class SweepConfig:
    """Sweep description; JSON-serialisable through :meth:`from_dict` / ``asdict``.

    ``n_d_ratios`` multiply ``n_o`` (sizedico and sensors suites); the noise
    suite uses ``n_d`` directly. ``sbl_beta_max`` caps the SBL noise
    precision at that multiple of ``n_o / ||s||**2``, i.e. the residual is
    never assumed smaller than about ``||s|| / sqrt(sbl_beta_max)``. When it
    is ``None`` the cap is picked from ``sbl_beta_grid`` by
    ``sbl_cv_folds``-fold validation on the training set, once per seed and sensor count.
    """

    methods: list[str] = field(default_factory=lambda: list(METHODS))
    grid: tuple[int, int] = (32, 24)
    n_modes: int = 100
    decay: float = 1.5
    coeff_law: str = "gaussian"
    n_s: int = 200
    n_cv: int = 50
    n_o: int = 10
    n_o_values: list[int] = field(default_factory=lambda: [5, 10, 20])
    n_d_ratios: list[int] = field(default_factory=lambda: [1, 2, 5, 10])
    n_d: int = 50
    delta_train: list[float] = field(default_factory=lambda: [0.0, 0.05, 0.1, 0.3, 0.5])
    delta_test: list[float] = field(default_factory=lambda: [0.0, 0.05, 0.1, 0.3, 0.5])
    replicas: int = 5
    seeds: list[int] = field(default_factory=lambda: [0])
    sensor_trials: int = 10
    sensor_n_d_ratio: int = 5
    ksvd_iterations: int = 50
    r_max: int = 40
    conv_window: int = 5
    conv_rel_tol: float = 1e-3
    sbl_tol: float = 1e-6
    sbl_beta_max: float | None = None
    sbl_beta_grid: list[float] = field(default_factory=lambda: [1.0, 3.0, 10.0])
    sbl_cv_folds: int = 5
    n_jobs: int = 1

    def __post_init__(self):
        self.grid = tuple(self.grid)
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        if self.replicas < 1:
            raise ValueError("replicas must be at least 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "SweepConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown sweep keys {sorted(unknown)}")
        return cls(**doc)

    def spec(self, seed: int) -> SyntheticSpec:
        return SyntheticSpec(self.grid, self.n_modes, self.decay, self.coeff_law, seed)


@dataclass
class SweepRow:
    method: str
    n_d: int
    n_o: int
    delta_train: float
    delta_test: float
    epsilon: float
    seconds: float
    seed: int = 0
    note: str = ""


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r.method, r.n_d, r.n_o, repr(float(r.delta_train)), repr(float(r.delta_test)),
                        repr(float(r.epsilon)), f"{r.seconds:.6f}"])
        return buf.getvalue()

    def save_csv(self, path) -> None:
        _atomic_write(Path(path), self.to_csv().encode())

    @classmethod
    def from_csv(cls, text: str) -> "SweepResult":
        rd = csv.reader(io.StringIO(text))
        header = tuple(next(rd))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected header {header}")
        rows = [
            SweepRow(m, int(nd), int(no), float(dtr), float(dte), float(eps), float(sec))
            for m, nd, no, dtr, dte, eps, sec in rd
        ]
        return cls(rows)

    def median(self, method: str, **cell) -> float:
        """Median epsilon over the rows of ``method`` matching ``cell`` (NaNs dropped)."""
        eps = [
            r.epsilon for r in self.rows
            if r.method == method and all(getattr(r, k) == v for k, v in cell.items()) and np.isfinite(r.epsilon)
        ]
        return float(np.median(eps)) if eps else math.nan

    def dat_tables(self) -> dict[str, str]:
        """Per-method whitespace tables of median/min/max epsilon per cell."""
        out = {}
        for m in dict.fromkeys(r.method for r in self.rows):
            cells: dict[tuple, list[float]] = {}
            for r in self.rows:
                if r.method == m:
                    cells.setdefault((r.n_d, r.n_o, r.delta_train, r.delta_test), []).append(r.epsilon)
            lines = ["# n_d n_o delta_train delta_test eps_median eps_min eps_max n_finite"]
            for key in sorted(cells):
                e = np.array(cells[key])
                f = e[np.isfinite(e)]
                stats = (np.median(f), f.min(), f.max()) if f.size else (math.nan,) * 3
                lines.append(" ".join(str(v) for v in (*key, *(repr(float(s)) for s in stats), f.size)))
            out[m] = "\n".join(lines) + "\n"
        return out


@dataclass
class BenchData:
    """One seeded ensemble split into training and held-out snapshots."""

    Y_train: np.ndarray
    Y_test: np.ndarray
    mean_field: np.ndarray
    factors: object = None

    @classmethod
    def make(cls, cfg: SweepConfig, seed: int) -> "BenchData":
        Y = synth_ensemble(cfg.spec(seed), cfg.n_s + cfg.n_cv)
        Ytr, Yte = Y[:, : cfg.n_s], Y[:, cfg.n_s :]
        return cls(Ytr, Yte, Ytr.mean(axis=1))


def _training_pairs(data: BenchData, C, delta: float, replicas: int, seed: int):
    """Centred training fields and (possibly noisy, replicated) measurements."""
    Yc = data.Y_train - data.mean_field[:, None]
    S = observe(C, data.Y_train)
    mean_obs = observe(C, data.mean_field)
    if delta > 0:
        S = np.hstack([
            apply_noise(S, NoiseSpec("multiplicative", delta, derive_seed(seed, 1, rep))) for rep in range(replicas)
        ])
        Yc = np.tile(Yc, (1, replicas))
    return Yc, S - mean_obs[:, None], mean_obs


def train_method(
    method: str, data: BenchData, C, n_d: int, delta: float, cfg: SweepConfig, seed: int, beta_max: float | None = None
):
    """Train one method and return its model bundle."""
    n_o = C.n_obs
    if method == "pca":
        Yc = data.Y_train - data.mean_field[:, None]
        return pca_bundle(pca_learn(Yc, n_d, data.mean_field), C)
    if method == "ksvd":
        Yc = data.Y_train - data.mean_field[:, None]
        model = ksvd_learn(Yc, n_d, min(n_o, n_d), cfg.ksvd_iterations, seed=derive_seed(seed, 2),
                           mean_field=data.mean_field)
        return ksvd_bundle(model, C)
    Yc, Sc, mean_obs = _training_pairs(data, C, delta, cfg.replicas, seed)
    # known training noise: fix the precision at the average noise power
    beta = None
    if method == "gobal-sbl" and delta > 0:
        beta = 1.0 / (delta**2 * float(np.mean(observe(C, data.Y_train) ** 2)))
    opts = GobalOptions(
        n_d=n_d,
        r_max=cfg.r_max,
        sc_mode="sbl" if method == "gobal-sbl" else "omp",
        K=n_o,
        conv_rel_tol=cfg.conv_rel_tol,
        conv_window=cfg.conv_window,
        seed=derive_seed(seed, 3),
        sbl_beta_fixed=beta is not None,
        sbl_beta=beta,
        sbl=SblOptions(tol=cfg.sbl_tol, beta_bounds=(1e-2, beta_max or cfg.sbl_beta_max or 10.0)),
        n_jobs=cfg.n_jobs,
    )
    factors = data.factors if delta == 0 else None
    res = gobal_learn(Yc, Sc, C, opts, mean_field=data.mean_field, mean_obs=mean_obs, factors=factors)
    return res.bundle


def evaluate_bundle(bundle, method: str, data: BenchData, C, delta_test: float, seed: int) -> float:
    S = observe(C, data.Y_test)
    if delta_test > 0:
        S = apply_noise(S, NoiseSpec("multiplicative", delta_test, derive_seed(seed, 4)))
    mode = "map" if method == "gobal-sbl" else "deterministic"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        Yh = estimate_fields(bundle, S, mode)
    return recerr(Yh, data.Y_test)


def choose_sensors(data: BenchData, cfg: SweepConfig, n_o: int, seed: int) -> tuple[int, ...]:
    """Random-best wall sensors judged by K-SVD on a validation split of the training set."""
    pool = 2 * cfg.grid[0]
    n_val = max(1, cfg.n_s // 5)
    fit = data.Y_train[:, :-n_val]
    val = data.Y_train[:, -n_val:]
    mean = fit.mean(axis=1)
    qr = gram_factorize(fit - mean[:, None])
    n_d = max(n_o, min(cfg.sensor_n_d_ratio * n_o, qr.rank))
    model = ksvd_learn(fit - mean[:, None], n_d, n_o, cfg.ksvd_iterations, seed=derive_seed(seed, 5),
                       mean_field=mean, factors=qr)
    sub = BenchData(fit, val, mean)

    def evaluate(chosen):
        C = sensor_operator(cfg.grid, chosen)
        return evaluate_bundle(ksvd_bundle(model, C), "ksvd", sub, C, 0.0, seed)

    cands = random_index_sets(pool, n_o, cfg.sensor_trials, derive_seed(seed, 6, n_o))
    return select_sensors_random_best(cands, evaluate, cfg.sensor_trials, derive_seed(seed, 7, n_o)).best


def choose_sbl_beta_max(data: BenchData, cfg: SweepConfig, C, seed: int) -> float:
    """Noise-precision cap for gobal-sbl picked by k-fold validation on the training set."""
    if cfg.sbl_beta_max is not None:
        return float(cfg.sbl_beta_max)
    n_s = data.Y_train.shape[1]
    folds = np.array_split(np.arange(n_s), cfg.sbl_cv_folds)
    scores = np.zeros(len(cfg.sbl_beta_grid))
    for f, val in enumerate(folds):
        fit = data.Y_train[:, np.setdiff1d(np.arange(n_s), val)]
        sub = BenchData(fit, data.Y_train[:, val], fit.mean(axis=1))
        n_d = min(cfg.sensor_n_d_ratio * C.n_obs, np.linalg.matrix_rank(fit - fit.mean(axis=1)[:, None]))
        for i, b in enumerate(cfg.sbl_beta_grid):
            try:
                bundle = train_method("gobal-sbl", sub, C, n_d, 0.0, cfg, derive_seed(seed, 8, f), beta_max=b)
                scores[i] += evaluate_bundle(bundle, "gobal-sbl", sub, C, 0.0, seed) ** 2
            except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
                log.info("beta cap %g failed: %s", b, exc)
                scores[i] = np.inf
    best = float(cfg.sbl_beta_grid[int(np.argmin(scores))])
    log.info("seed %d n_o=%d: sbl beta cap %g (validation %s)", seed, C.n_obs, best, np.round(scores, 4).tolist())
    return best


def _run(cfg: SweepConfig, cells, progress=None) -> SweepResult:
    """``cells`` yields ``(n_o, n_d, delta_train, [delta_test, ...])``."""
    out = SweepResult()
    for seed in cfg.seeds:
        data = BenchData.make(cfg, seed)
        data.factors = gram_factorize(data.Y_train - data.mean_field[:, None])
        sensors: dict[int, tuple[int, ...]] = {}
        beta_caps: dict[int, float] = {}
        for n_o, n_d, dtr, dtes in cells:
            if n_o not in sensors:
                sensors[n_o] = choose_sensors(data, cfg, n_o, seed)
            C = sensor_operator(cfg.grid, sensors[n_o])
            if "gobal-sbl" in cfg.methods and n_o not in beta_caps:
                beta_caps[n_o] = choose_sbl_beta_max(data, cfg, C, seed)
            cell_seed = derive_seed(seed, n_o, n_d, int(round(dtr * 1e6)))
            for method in cfg.methods:
                t0 = time.perf_counter()
                try:
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore")
                        bundle = train_method(method, data, C, n_d, dtr, cfg, cell_seed, beta_caps.get(n_o))
                    t_train = time.perf_counter() - t0
                    err = None
                except Exception as exc:  # recorded per cell, sweep continues
                    bundle, t_train, err = None, time.perf_counter() - t0, f"{type(exc).__name__}: {exc}"
                for dte in dtes:
                    t1 = time.perf_counter()
                    if bundle is None:
                        eps, note = math.nan, err
                    else:
                        try:
                            eps, note = evaluate_bundle(bundle, method, data, C, dte, cell_seed), ""
                        except Exception as exc:
                            eps, note = math.nan, f"{type(exc).__name__}: {exc}"
                    if note:
                        log.warning("cell %s n_o=%d n_d=%d failed: %s", method, n_o, n_d, note)
                    row = SweepRow(method, n_d, n_o, dtr, dte, eps, t_train + time.perf_counter() - t1, seed, note)
                    out.rows.append(row)
                    if progress:
                        progress(row)
    return out


def sweep_dictionary_size(cfg: SweepConfig, progress=None) -> SweepResult:
    cells = [(cfg.n_o, m * cfg.n_o, 0.0, [0.0]) for m in cfg.n_d_ratios]
    return _run(cfg, cells, progress)


def sweep_sensor_count(cfg: SweepConfig, progress=None) -> SweepResult:
    cells = [(n_o, m * n_o, 0.0, [0.0]) for n_o in cfg.n_o_values for m in cfg.n_d_ratios]
    return _run(cfg, cells, progress)


def noise_grid(cfg: SweepConfig, progress=None) -> SweepResult:
    cells = [(cfg.n_o, cfg.n_d, dtr, list(cfg.delta_test)) for dtr in cfg.delta_train]
    return _run(cfg, cells, progress)


SUITES = {"sizedico": sweep_dictionary_size, "sensors": sweep_sensor_count, "noise": noise_grid}


@dataclass(frozen=True)
class CostModel:
    """Leading-order operation counts of one deterministic learning run."""

    decomp: Fraction
    ecu: Fraction
    sc: Fraction
    fcu: Fraction
    total: Fraction
    total_leading: Fraction

    def as_dict(self) -> dict[str, float]:
        return {k: float(v) for k, v in asdict(self).items()}


def cost_ecu(n_d: int, n_s: int) -> Fraction:
    return Fraction(3, 2) * n_d**2 * n_s + Fraction(1, 3) * n_d**3


def cost_sc(n_o: int, n_d: int, n_s: int) -> Fraction:
    return Fraction(2 * n_o * n_d * n_s + 2 * n_o**2 * n_s + 2 * n_o * (n_d + n_s) + n_o**3)


def cost_fcu(n_o: int, n_d: int, n_s: int) -> Fraction:
    return Fraction(4 * n_o * n_s**2 + 6 * n_s * n_o * n_d + 2 * n_s * n_o**2 + 2 * n_d**2 * (n_o + n_s))


def cost_model(n_o: int, n_d: int, n_s: int, n_y: int, r: int, m_ratio: int) -> CostModel:
    """Closed-form counts; ``decomp`` keeps only its ``n_y n_s**2`` term."""
    if not n_o <= n_d <= n_s <= n_y:
        raise ValueError("cost model assumes n_o <= n_d <= n_s <= n_y")
    if r < 0 or m_ratio < 1:
        raise ValueError("need r >= 0 and m_ratio >= 1")
    decomp = Fraction(n_y * n_s**2)
    ecu, sc, fcu = cost_ecu(n_d, n_s), cost_sc(n_o, n_d, n_s), cost_fcu(n_o, n_d, n_s)
    total = decomp + r * (ecu + n_s * sc + fcu)
    leading = Fraction(n_s**2 * (n_y + 2 * r * n_o**2 * (m_ratio + 1)))
    return CostModel(decomp, ecu, sc, fcu, total, leading)


def measure_sc_ops(n_o: int, n_d: int, n_s: int, K: int | None = None, seed: int = 0) -> int:
    """Counted operations of one sparse-coding step on random unit atoms."""
    rng = np.random.default_rng(seed)
    D = rng.standard_normal((n_o, n_d))
    D /= np.linalg.norm(D, axis=0)
    S = rng.standard_normal((n_o, n_s))
    ops = OpCounter()
    batch_sparse_code(D, S, K or n_o, ops=ops)
    return ops.flops
