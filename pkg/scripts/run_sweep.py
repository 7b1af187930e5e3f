"""Run one benchmark sweep and write results.csv plus per-method .dat tables.

    python scripts/run_sweep.py sizedico --seeds 0-9 --out runs/sizedico
    python scripts/run_sweep.py noise --seeds 0-4 --methods gobal-omp,gobal-sbl --out runs/noise
"""

import json
import logging
from dataclasses import asdict
from pathlib import Path

import click

from obsdict import bench

SUITES = {
    "sizedico": bench.sweep_dictionary_size,
    "sensors": bench.sweep_sensor_count,
    "noise": bench.noise_grid,
}


def _seeds(text: str) -> list[int]:
    if "-" in text:
        lo, hi = map(int, text.split("-"))
        return list(range(lo, hi + 1))
    return [int(t) for t in text.split(",")]


@click.command()
@click.argument("suite", type=click.Choice(sorted(SUITES)))
@click.option("--seeds", default="0", help="Range '0-9' or list '0,3,5'.")
@click.option("--methods", default=None, help="Comma-separated subset of methods.")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None, help="JSON sweep overrides.")
@click.option("--out", type=click.Path(), required=True)
def main(suite, seeds, methods, config_path, out):
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    doc = json.loads(Path(config_path).read_text()) if config_path else {}
    doc["seeds"] = _seeds(seeds)
    if methods:
        doc["methods"] = methods.split(",")
    cfg = bench.SweepConfig.from_dict(doc)
    res = SUITES[suite](cfg, progress=lambda row: click.echo(f"{row.seed} {row.method} n_d={row.n_d} n_o={row.n_o} "
                                                             f"dtr={row.delta_train} dte={row.delta_test} "
                                                             f"eps={row.epsilon:.4f}"))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    res.save_csv(out / "results.csv")
    for method, table in res.dat_tables().items():
        (out / f"{suite}_{method}.dat").write_text(table)
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2))


if __name__ == "__main__":
    main()
