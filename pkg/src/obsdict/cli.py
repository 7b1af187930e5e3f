"""Command-line interface: ``obsdict gen|train|estimate|bench|report``.

Exit codes: 0 success, 2 input/format error, 3 numerical failure,
4 configuration or usage error.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import click
import numpy as np

from . import bench
from .baselines import RankError, UnobservableError, ksvd_bundle, ksvd_learn, pca_bundle, pca_learn
from .gobal import GobalOptions, estimate_fields, gobal_estimate, gobal_learn
from .linalg import DegenerateError
from .matio import FormatError, ModelBundle, NonFiniteError, __version__, _atomic_write, load_matrix, save_matrix
from .observation import (
    NoiseSpec,
    ObservationOperator,
    apply_noise,
    derive_seed,
    observe,
    point_restriction,
    stencil_operator,
)
from .sbl import NumericalFailure, SblOptions

log = logging.getLogger("obsdict")

EXIT_OK, EXIT_IO, EXIT_NUMERIC, EXIT_CONFIG = 0, 2, 3, 4


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


class InputError(OSError):
    """Unreadable, missing or inconsistent input files."""


def _section(cls, doc, name):
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


@dataclass
class DataConfig:
    grid: list[int] = field(default_factory=lambda: [32, 24])
    n_modes: int = 100
    decay: float = 1.5
    coeff_law: str = "gaussian"
    n_s: int = 200


@dataclass
class ObservationConfig:
    """``wall``: wall-library ``indices`` (or ``count`` drawn with the run seed);
    ``point``: field ``indices``; ``stencil``: explicit ``stencils``."""

    kind: str = "wall"
    indices: list[int] | None = None
    count: int = 10
    stencils: list | None = None


@dataclass
class NoiseConfig:
    kind: str = "none"
    sigma: float = 0.0
    replicas: int = 1


@dataclass
class MethodConfig:
    name: str = "gobal"
    n_d: int = 50
    K: int | None = None
    iterations: int = 50
    r_max: int = 100
    sc_mode: str = "omp"
    n_up: int | None = None
    conv_rel_tol: float = 1e-4
    conv_window: int = 10
    sbl_tol: float = 1e-6
    sbl_beta_max: float = 1e10
    sbl_beta: float | None = None
    sbl_beta_online: bool = True
    n_jobs: int = 1


@dataclass
class RunConfig:
    seed: int
    data: DataConfig = field(default_factory=DataConfig)
    observation: ObservationConfig = field(default_factory=ObservationConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    output_dir: str | None = None
    bench: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        if "seed" not in doc:
            raise ConfigError("config needs an explicit 'seed'")
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
        seed = doc["seed"]
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        cfg = cls(
            seed=seed,
            data=_section(DataConfig, doc.get("data"), "data"),
            observation=_section(ObservationConfig, doc.get("observation"), "observation"),
            noise=_section(NoiseConfig, doc.get("noise"), "noise"),
            method=_section(MethodConfig, doc.get("method"), "method"),
            output_dir=doc.get("output_dir"),
            bench=doc.get("bench") or {},
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if len(self.data.grid) != 2:
            raise ConfigError("data.grid must be [nx, ny]")
        try:
            self.synthetic_spec()
            NoiseSpec(self.noise.kind, self.noise.sigma, 0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.noise.replicas < 1:
            raise ConfigError("noise.replicas must be at least 1")
        if self.observation.kind not in ("wall", "point", "stencil"):
            raise ConfigError(f"unknown observation kind {self.observation.kind!r}")
        if self.method.name not in ("pca", "ksvd", "gobal"):
            raise ConfigError(f"unknown method {self.method.name!r}")
        if self.method.sc_mode not in ("omp", "sbl"):
            raise ConfigError(f"unknown sc_mode {self.method.sc_mode!r}")

    def synthetic_spec(self) -> bench.SyntheticSpec:
        d = self.data
        return bench.SyntheticSpec(tuple(d.grid), d.n_modes, d.decay, d.coeff_law, self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> RunConfig:
    if path is None:
        raise ConfigError("a --config file is required")
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(doc)


def build_operator(cfg: RunConfig) -> ObservationOperator:
    o = cfg.observation
    grid = tuple(cfg.data.grid)
    n_field = grid[0] * grid[1]
    try:
        if o.kind == "wall":
            pool = 2 * grid[0]
            idx = o.indices
            if idx is None:
                idx = bench.random_index_sets(pool, o.count, 1, derive_seed(cfg.seed, 11))[0]
            if any(not 0 <= i < pool for i in idx):
                raise ConfigError(f"wall sensor index outside [0, {pool})")
            return bench.sensor_operator(grid, idx)
        if o.kind == "point":
            if not o.indices:
                raise ConfigError("point observation needs indices")
            return point_restriction(o.indices, n_field)
        if not o.stencils:
            raise ConfigError("stencil observation needs stencils")
        return stencil_operator(o.stencils, n_field)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _write_json(path: Path, doc) -> None:
    _atomic_write(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


def _load(path, what: str) -> np.ndarray:
    if path is None:
        raise ConfigError(f"missing --{what}")
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} file {p} does not exist")
    return load_matrix(p)


def _load_operator(path) -> ObservationOperator:
    if path is None:
        raise ConfigError("missing --sensors")
    try:
        return ObservationOperator.from_json(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read sensors {path}: {exc}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed sensor description ({exc})") from exc


def _out_dir(out, cfg: RunConfig | None) -> Path:
    target = out or (cfg.output_dir if cfg else None)
    if target is None:
        raise ConfigError("no output directory (--out or output_dir)")
    return Path(target)


def _seed_option(f):
    return click.option("--seed", type=int, default=None, help="Override the config seed.")(f)


@click.group()
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
@click.version_option(__version__, prog_name="obsdict")
def cli(verbose):
    """Observable dictionary learning: data generation, training, estimation, benchmarks."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@cli.command()
@click.option("--config", "config_path", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), default=None)
@_seed_option
def gen(config_path, out, seed):
    """Generate a synthetic training set: Y.odl, S.odl, mean.odl, sensors.json, manifest.json."""
    cfg = load_config(config_path)
    if seed is not None:
        cfg.seed = seed
    out = _out_dir(out, cfg)
    C = build_operator(cfg)
    Y = bench.synth_ensemble(cfg.synthetic_spec(), cfg.data.n_s)
    S = observe(C, Y)
    if cfg.noise.kind != "none" and cfg.noise.sigma > 0:
        S = np.hstack([
            apply_noise(S, NoiseSpec(cfg.noise.kind, cfg.noise.sigma, derive_seed(cfg.seed, 12, rep)))
            for rep in range(cfg.noise.replicas)
        ])
    save_matrix(Y, out / "Y.odl")
    save_matrix(S, out / "S.odl")
    save_matrix(Y.mean(axis=1), out / "mean.odl")
    _atomic_write(out / "sensors.json", (C.to_json() + "\n").encode())
    _write_json(out / "manifest.json", {"config": cfg.to_dict(), "version": __version__, "command": "gen"})
    click.echo(f"wrote {out} (Y {Y.shape[0]}x{Y.shape[1]}, S {S.shape[0]}x{S.shape[1]})")


def _train(method: str, Y, S, C, m: MethodConfig, seed: int, log_rows: list):
    if S.shape[0] != C.n_obs:
        raise InputError(f"S has {S.shape[0]} rows but the sensors define {C.n_obs}")
    if S.shape[1] % Y.shape[1]:
        raise InputError(f"S has {S.shape[1]} columns, not a multiple of the {Y.shape[1]} snapshots")
    mean_field = Y.mean(axis=1)
    mean_obs = observe(C, mean_field)
    Yc = Y - mean_field[:, None]
    n_o = C.n_obs
    if method == "pca":
        bundle = pca_bundle(pca_learn(Yc, m.n_d, mean_field), C, mean_obs)
        if not np.any(bundle.D):
            raise UnobservableError("dictionary not observable from sensors")
    elif method == "ksvd":
        K = m.K or min(n_o, m.n_d)
        model = ksvd_learn(Yc, m.n_d, K, m.iterations, seed=derive_seed(seed, 2), mean_field=mean_field)
        bundle = ksvd_bundle(model, C, mean_obs)
        log_rows.extend(
            dict(iteration=i, epsilon=e, epsilon_best=min(model.errors[: i + 1]), seconds=0.0)
            for i, e in enumerate(model.errors)
        )
    else:
        reps = S.shape[1] // Y.shape[1]
        opts = GobalOptions(
            n_d=m.n_d,
            n_up=m.n_up,
            r_max=m.r_max,
            sc_mode=m.sc_mode,
            K=m.K or n_o,
            conv_rel_tol=m.conv_rel_tol,
            conv_window=m.conv_window,
            seed=seed,
            sbl_beta_fixed=m.sbl_beta is not None,
            sbl_beta=m.sbl_beta,
            sbl_beta_online=m.sbl_beta_online,
            sbl=SblOptions(tol=m.sbl_tol, beta_bounds=(1e-2, m.sbl_beta_max)),
            n_jobs=m.n_jobs,
        )
        res = gobal_learn(
            np.tile(Yc, (1, reps)), S - mean_obs[:, None], C, opts, mean_field=mean_field, mean_obs=mean_obs,
            callback=log_rows.append,
        )
        bundle = res.bundle
    bundle.meta.update(seed=int(seed), n_s=int(Y.shape[1]))
    return bundle


@cli.command()
@click.option("--method", type=click.Choice(["pca", "ksvd", "gobal"]), default=None)
@click.option("--y", "y_path", type=click.Path(), default=None, help="Training fields (ODL1 or CSV).")
@click.option("--s", "s_path", type=click.Path(), default=None, help="Training measurements.")
@click.option("--sensors", type=click.Path(), default=None, help="Observation operator JSON.")
@click.option("--out", type=click.Path(), default=None, help="Bundle directory.")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--n-d", type=int, default=None)
@click.option("--r-max", type=int, default=None)
@click.option("--sc-mode", type=click.Choice(["omp", "sbl"]), default=None)
@click.option("--jobs", type=int, default=None, help="Worker processes for sparse coding.")
@_seed_option
def train(method, y_path, s_path, sensors, out, config_path, n_d, r_max, sc_mode, jobs, seed):
    """Learn a model bundle from training fields and measurements."""
    cfg = load_config(config_path) if config_path else RunConfig(seed=0)
    if config_path is None and seed is None:
        raise ConfigError("give --seed or a --config with a seed")
    m = cfg.method
    for key, val in (("name", method), ("n_d", n_d), ("r_max", r_max), ("sc_mode", sc_mode), ("n_jobs", jobs)):
        if val is not None:
            setattr(m, key, val)
    seed = cfg.seed if seed is None else seed
    out = _out_dir(out, cfg)
    Y, S, C = _load(y_path, "y"), _load(s_path, "s"), _load_operator(sensors)
    if C.n_field != Y.shape[0]:
        raise InputError(f"sensors act on {C.n_field} field entries, Y has {Y.shape[0]} rows")
    rows: list[dict] = []
    bundle = _train(m.name, Y, S, C, m, seed, rows)
    bundle.save(out)
    lines = ["iteration,epsilon,epsilon_best,seconds"]
    lines += [f"{r['iteration']},{r['epsilon']!r},{r['epsilon_best']!r},{r['seconds']:.6f}" for r in rows]
    _atomic_write(out / "train_log.csv", ("\n".join(lines) + "\n").encode())
    click.echo(f"trained {m.name} (n_d={bundle.n_d}) -> {out}")


@cli.command()
@click.option("--model", type=click.Path(), required=True)
@click.option("--s", "s_path", type=click.Path(), required=True)
@click.option("--mode", type=click.Choice(["det", "map"]), default="det")
@click.option("--out", type=click.Path(), required=True)
def estimate(model, s_path, mode, out):
    """Estimate fields from measurements with a trained bundle."""
    mdir = Path(model)
    if not (mdir / "meta.json").exists():
        raise InputError(f"{mdir} is not a model bundle")
    try:
        bundle = ModelBundle.load(mdir)
    except (json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"{mdir}: malformed bundle ({exc})") from exc
    S = _load(s_path, "s")
    if S.shape[0] != bundle.n_o:
        raise InputError(f"measurements have {S.shape[0]} rows, model expects {bundle.n_o}")
    out = Path(out)
    if mode == "det":
        save_matrix(estimate_fields(bundle, S, "deterministic"), out / "yhat.odl")
    else:
        if bundle.method == "pca":
            raise ConfigError("map mode needs a sparse dictionary (ksvd or gobal)")
        pairs = gobal_estimate(bundle, S, "map")
        save_matrix(np.column_stack([fp.mean for fp, _ in pairs]), out / "yhat.odl")
        save_matrix(np.column_stack([fp.diag_std for fp, _ in pairs]), out / "diag_std.odl")
        post = [
            dict(
                active=res.posterior.active.tolist(),
                mu=res.posterior.mu.tolist(),
                lam=float(res.hyper.lam),
                beta=float(res.hyper.beta),
                log_evidence=float(res.posterior.log_evidence),
            )
            for _, res in pairs
        ]
        _write_json(out / "posterior.json", post)
    click.echo(f"estimated {S.shape[1]} field(s) -> {out}")


def _sweep_config(cfg_path, seed) -> bench.SweepConfig:
    doc = {}
    if cfg_path:
        try:
            doc = json.loads(Path(cfg_path).read_text())
        except OSError as exc:
            raise InputError(f"cannot read config {cfg_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {cfg_path} is not valid JSON: {exc}") from exc
        if "bench" in doc:
            doc = doc["bench"]
    try:
        sc = bench.SweepConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if seed is not None:
        sc.seeds = [seed]
    return sc


def _write_results(res: bench.SweepResult, out: Path, suite: str) -> None:
    res.save_csv(out / "results.csv")
    for method, table in res.dat_tables().items():
        _atomic_write(out / f"{suite}_{method}.dat", table.encode())


@cli.command("bench")
@click.option("--suite", required=True, help="sizedico, sensors or noise.")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), required=True)
@_seed_option
def bench_cmd(suite, config_path, out, seed):
    """Run a benchmark sweep and write results.csv plus per-method .dat tables."""
    if suite not in bench.SUITES:
        raise ConfigError(f"unknown suite {suite!r}; choose from {sorted(bench.SUITES)}")
    sc = _sweep_config(config_path, seed)
    res = bench.SUITES[suite](
        sc, progress=lambda r: log.info("%s n_d=%d n_o=%d eps=%.4f", r.method, r.n_d, r.n_o, r.epsilon)
    )
    out = Path(out)
    _write_results(res, out, suite)
    _write_json(out / "manifest.json", {"suite": suite, "config": asdict(sc), "version": __version__})
    n_nan = sum(1 for r in res.rows if not np.isfinite(r.epsilon))
    click.echo(f"{len(res.rows)} rows ({n_nan} failed) -> {out / 'results.csv'}")


@cli.command()
@click.option("--results", type=click.Path(), required=True, help="results.csv from a bench run.")
@click.option("--out", type=click.Path(), default=None, help="Optional directory for .dat tables.")
def report(results, out):
    """Summarise a results.csv: median epsilon per method and cell."""
    p = Path(results)
    if not p.exists():
        raise InputError(f"{p} does not exist")
    try:
        res = bench.SweepResult.from_csv(p.read_text())
    except (ValueError, StopIteration) as exc:
        raise FormatError(f"{p}: {exc}") from exc
    cells = sorted({(r.n_d, r.n_o, r.delta_train, r.delta_test) for r in res.rows})
    methods = list(dict.fromkeys(r.method for r in res.rows))
    click.echo("n_d n_o d_train d_test " + " ".join(f"{m:>10}" for m in methods))
    for nd, no, dtr, dte in cells:
        meds = [res.median(m, n_d=nd, n_o=no, delta_train=dtr, delta_test=dte) for m in methods]
        click.echo(f"{nd:3d} {no:3d} {dtr:7.3g} {dte:6.3g} " + " ".join(f"{v:10.4f}" for v in meds))
    if out:
        out = Path(out)
        for method, table in res.dat_tables().items():
            _atomic_write(out / f"{method}.dat", table.encode())


def main(argv=None) -> int:
    """Entry point with the stable exit-code contract."""
    try:
        cli.main(args=argv, prog_name="obsdict", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_CONFIG
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return EXIT_CONFIG
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    except (InputError, FormatError, NonFiniteError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        click.echo(f"input error: {exc}", err=True)
        return EXIT_IO
    except (RankError, UnobservableError, NumericalFailure, DegenerateError, np.linalg.LinAlgError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return EXIT_NUMERIC
    except ArithmeticError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return EXIT_NUMERIC
    except ValueError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
