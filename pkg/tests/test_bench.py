import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from obsdict import bench
from obsdict.bench import (
    SweepConfig,
    SweepResult,
    SweepRow,
    SyntheticSpec,
    cost_ecu,
    cost_fcu,
    cost_model,
    cost_sc,
    field_modes,
    measure_sc_ops,
    random_index_sets,
    recerr,
    select_sensors_random_best,
    sensor_operator,
    synth_ensemble,
    wall_sensor_library,
)


def test_field_modes_orthonormal():
    Phi = field_modes((8, 6), 20)
    assert np.allclose(Phi.T @ Phi, np.eye(20), atol=1e-12)


def test_synth_single_mode_and_determinism():
    Y = synth_ensemble(SyntheticSpec((8, 6), 1, 1.5, "gaussian", 3), 10)
    phi = field_modes((8, 6), 1)[:, 0]
    assert np.allclose(Y - np.outer(phi, phi @ Y), 0.0, atol=1e-12)
    spec = SyntheticSpec((8, 6), 10, 1.5, "uniform", 4)
    assert np.array_equal(synth_ensemble(spec, 7), synth_ensemble(spec, 7))
    assert not np.array_equal(synth_ensemble(spec, 7), synth_ensemble(SyntheticSpec((8, 6), 10, 1.5, "uniform", 5), 7))


def test_synth_spectrum_ratio():
    decay = 1.5
    Y = synth_ensemble(SyntheticSpec((8, 6), 10, decay, "gaussian", 0), 10_000)
    ev = np.sort(np.linalg.eigvalsh(np.cov(Y)))[::-1]
    assert abs(ev[0] / ev[1] / 2**decay - 1) < 0.1


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec((4, 4), 17, 1.0, "gaussian", 0)
    with pytest.raises(ValueError):
        SyntheticSpec((4, 4), 3, 0.0, "gaussian", 0)
    with pytest.raises(ValueError):
        SyntheticSpec((4, 4), 3, 1.0, "cauchy", 0)


def test_wall_library_stencils():
    lib = wall_sensor_library((4, 3))
    assert len(lib) == 8
    y = np.arange(12.0) ** 2
    C = sensor_operator((4, 3), range(8))
    # bottom wall of column 1 is node 3, top wall is node 5
    assert np.isclose((C.matrix @ y)[1], (y[4] - y[3]) * 3)
    assert np.isclose((C.matrix @ y)[5], (y[4] - y[5]) * 3)


def test_recerr_examples(rng):
    Y = rng.standard_normal((6, 4))
    assert recerr(Y, Y) == 0.0
    assert recerr(np.zeros_like(Y), Y) == 1.0
    assert abs(recerr(1.1 * Y, Y) - 0.1) < 1e-12
    with pytest.raises(ValueError):
        recerr(Y, np.zeros_like(Y))
    Q = np.linalg.qr(rng.standard_normal((6, 6)))[0]
    Yh = rng.standard_normal((6, 4))
    assert abs(recerr(Q @ Yh, Q @ Y) - recerr(Yh, Y)) < 1e-12


def test_sensor_search():
    cands = random_index_sets(20, 3, 8, seed=1)
    assert all(len(set(c)) == 3 and list(c) == sorted(c) for c in cands)
    assert cands == random_index_sets(20, 3, 8, seed=1)
    one = select_sensors_random_best(cands, lambda c: 1.0, 1, 0)
    assert one.tried == [one.best]

    def ev(c):
        if c == cands[0]:
            raise ArithmeticError("not observable")
        return float(sum(c))

    res = select_sensors_random_best(cands, ev, 8, 0)
    assert res.best != cands[0]
    assert res.epsilon == min(e for e in res.epsilons if np.isfinite(e))
    assert res.epsilon <= np.nanmedian(res.epsilons)
    with pytest.raises(ValueError):
        random_index_sets(3, 4, 1, 0)


def test_sweep_result_csv_roundtrip():
    res = SweepResult([
        SweepRow("pca", 10, 5, 0.0, 0.1, 0.5, 1.25, 0, ""),
        SweepRow("gobal-sbl", 10, 5, 0.0, 0.1, math.nan, 0.5, 0, "boom"),
    ])
    text = res.to_csv()
    assert text.splitlines()[0].startswith(",".join(bench.CSV_HEADER))
    back = SweepResult.from_csv(text)
    assert back.rows[0].epsilon == 0.5 and math.isnan(back.rows[1].epsilon)
    assert set(res.dat_tables()) == {"pca", "gobal-sbl"}
    assert res.median("pca", n_d=10) == 0.5


def test_sweep_config_rejects_unknown():
    with pytest.raises(ValueError):
        SweepConfig.from_dict({"nonsense": 1})
    with pytest.raises(ValueError):
        SweepConfig(methods=["lasso"])


def test_degenerate_cell_exact():
    """n_d = rank, noise-free, every node observed: all methods exact."""
    from obsdict.gobal import GobalOptions, gobal_learn
    from obsdict.observation import observe, point_restriction

    cfg = SweepConfig(grid=(4, 3), n_modes=4, n_s=30, n_cv=10, n_o=4, n_d_ratios=[1], ksvd_iterations=5, r_max=3)
    data = bench.BenchData.make(cfg, 0)
    C = point_restriction(range(12), 12)
    for method in ("pca", "ksvd", "gobal-omp"):
        b = bench.train_method(method, data, C, 4, 0.0, cfg, 1)
        assert bench.evaluate_bundle(b, method, data, C, 0.0, 0) <= 1e-6, method
    # noise-free data: the SBL noise precision is known to be huge and fixed
    Yc = data.Y_train - data.mean_field[:, None]
    opts = GobalOptions(n_d=4, r_max=3, sc_mode="sbl", sbl_beta_fixed=True, sbl_beta=1e12,
                        sbl_beta_online=False)
    b = gobal_learn(Yc, observe(C, Yc), C, opts, mean_field=data.mean_field,
                    mean_obs=observe(C, data.mean_field)).bundle
    assert bench.evaluate_bundle(b, "gobal-sbl", data, C, 0.0, 0) <= 1e-6


def test_sweep_nan_rows_recorded():
    cfg = SweepConfig(methods=["pca"], grid=(6, 4), n_modes=6, n_s=20, n_cv=5, n_o=3, n_d_ratios=[1, 5],
                      sensor_trials=2, ksvd_iterations=2)
    res = bench.sweep_dictionary_size(cfg)
    assert len(res.rows) == 2
    bad = [r for r in res.rows if r.n_d == 15]
    assert math.isnan(bad[0].epsilon) and "RankError" in bad[0].note


def test_cost_model_substitution():
    assert cost_ecu(2, 4) == Fraction(80, 3)
    assert cost_sc(1, 1, 1) == 9
    assert cost_fcu(1, 1, 1) == 4 + 6 + 2 + 4
    cm = cost_model(2, 3, 4, 5, 0, 2)
    assert cm.total == cm.decomp == 5 * 16
    assert cm.total_leading == 16 * 5
    cm = cost_model(2, 4, 6, 10, 3, 2)
    assert cm.total == 10 * 36 + 3 * (cost_ecu(4, 6) + 6 * cost_sc(2, 4, 6) + cost_fcu(2, 4, 6))
    assert cm.total_leading == 36 * (10 + 2 * 3 * 4 * 3)
    with pytest.raises(ValueError):
        cost_model(5, 4, 6, 10, 1, 1)


@given(st.integers(1, 4), st.integers(0, 3), st.integers(0, 3), st.integers(0, 20))
@settings(max_examples=40)
def test_cost_model_monotone(n_o, a, b, c):
    n_d, n_s = n_o + a, n_o + a + b
    small = cost_model(n_o, n_d, n_s, n_s + c, 1, 1).total
    assert cost_model(n_o, n_d, n_s, n_s + c + 1, 1, 1).total > small
    assert cost_model(n_o, n_d, n_s, n_s + c, 2, 1).total > small


def test_sc_ops_linear_per_signal():
    per = [measure_sc_ops(10, 50, n, seed=0) / n for n in (50, 100, 200)]
    assert max(per) / min(per) < 2.0
