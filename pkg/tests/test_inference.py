from __future__ import annotations

import math

import numpy as np
import pytest

from nmacausal.data_model import Dataset, OutcomeKind, OutcomeSummary
from nmacausal.estimators import EstimatorSpec, Method, Pipeline, estimate_unadjusted
from nmacausal.inference import (
    BootstrapConfig,
    InferenceError,
    IntervalEstimate,
    bootstrap_replicates,
    cluster_bootstrap,
    coverage,
    philox_key,
    replicate_generator,
    resample_indices,
    resample_weights,
)
from nmacausal.simulation import CONTRASTS

from conftest import continuous

UNADJ = Pipeline([EstimatorSpec("u", Method.UNADJUSTED)], CONTRASTS)


def test_philox_streams_are_reproducible_and_distinct():
    k = philox_key(11, 3)
    a = replicate_generator(k, 5).random(4)
    b = replicate_generator(philox_key(11, 3), 5).random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, replicate_generator(k, 6).random(4))
    assert not np.array_equal(a, replicate_generator(philox_key(11, 4), 5).random(4))
    assert not np.array_equal(a, replicate_generator(philox_key(12, 3), 5).random(4))


def test_resample_weights_independent_of_chunking():
    k = philox_key(1)
    full = resample_weights(k, 10, 7)
    np.testing.assert_array_equal(full[3:8], resample_weights(k, 5, 7, start=3))
    assert np.all(full.sum(axis=1) == 7)
    np.testing.assert_array_equal(full[2], np.bincount(resample_indices(k, 2, 7), minlength=7))


def test_bootstrap_seeded_determinism(sim15):
    cfg = BootstrapConfig(replicates=60, seed=5)
    a = cluster_bootstrap(sim15, UNADJ, cfg)
    b = cluster_bootstrap(sim15, UNADJ, cfg)
    for k in a.replicates:
        np.testing.assert_array_equal(a.replicates[k], b.replicates[k])
    c = cluster_bootstrap(sim15, UNADJ, BootstrapConfig(replicates=60, seed=6))
    assert not np.array_equal(a.replicates["u:2-1"], c.replicates["u:2-1"], equal_nan=True)


def test_fast_path_equals_materialized_resamples(sim15):
    cfg = BootstrapConfig(replicates=40, seed=9)
    fast = bootstrap_replicates(sim15, UNADJ, cfg)

    def plain(d):
        return {f"u:{k}": v for k, v in estimate_unadjusted(d, CONTRASTS).contrasts.items()}

    slow = bootstrap_replicates(sim15, plain, cfg)
    for k in fast:
        np.testing.assert_allclose(fast[k], slow[k], atol=1e-12, equal_nan=True)


def test_percentile_interval_and_se(sim50):
    cfg = BootstrapConfig(replicates=200, seed=2)
    res = cluster_bootstrap(sim50, UNADJ, cfg)
    r = res.replicates["u:2-1"]
    iv = res["u:2-1"]
    assert iv.se == pytest.approx(np.std(r, ddof=1))
    assert (iv.lower, iv.upper) == pytest.approx(tuple(np.quantile(r, [0.025, 0.975])))
    assert iv.n_effective == 200 and iv.n_discarded == 0
    normal = cluster_bootstrap(sim50, UNADJ, BootstrapConfig(replicates=200, seed=2, ci="normal"))["u:2-1"]
    assert normal.upper - normal.point == pytest.approx(1.959963985 * iv.se, rel=1e-8)


def test_bootstrap_se_matches_analytic_se_for_arm_mean():
    rng = np.random.default_rng(4)
    rows = []
    for i in range(400):
        for lab in ("A", "B"):
            n = 100
            rows.append((f"s{i}", {"z": 0.0}, lab, n, OutcomeSummary.binary(n, int(rng.binomial(n, 0.3)))))
    d = Dataset.from_rows(rows, OutcomeKind.BINARY)
    pipe = Pipeline([EstimatorSpec("u", Method.UNADJUSTED)], ["A"])
    res = cluster_bootstrap(d, pipe, BootstrapConfig(replicates=1000, seed=1))
    p = d.table.ybar[d.table.treatment == 0]
    analytic = p.std(ddof=1) / math.sqrt(len(p))
    assert res["u:M[A]"].se == pytest.approx(analytic, rel=0.15)


def test_normal_interval_calibration():
    key = philox_key(2024, 1)
    pipe = Pipeline([EstimatorSpec("u", Method.UNADJUSTED)], ["1"])
    ivs = []
    for r in range(1000):
        g = replicate_generator(key, r)
        m = g.normal(size=60)
        d = continuous([(f"s{i // 2}", 0.0, "12"[i % 2], 10, m[i], 1.0) for i in range(60)])
        ivs.append(cluster_bootstrap(d, pipe, BootstrapConfig(replicates=200, seed=r, ci="normal"))["u:M[1]"])
    assert coverage(ivs, 0.0) == pytest.approx(0.95, abs=0.02)


def test_nan_point_gives_nan_interval(sim15):
    res = cluster_bootstrap(sim15, UNADJ, BootstrapConfig(replicates=10), point={"u:2-1": math.nan})
    assert math.isnan(res["u:2-1"].lower)


def test_all_replicates_discarded_raises():
    d = continuous([("a", 0.0, "1", 5, 1.0, 1.0), ("a", 0.0, "2", 5, 2.0, 1.0),
                    ("b", 1.0, "1", 5, 1.0, 1.0), ("b", 1.0, "2", 5, 3.0, 1.0)])

    def never(_):
        raise ArithmeticError("no")

    with pytest.raises(InferenceError):
        cluster_bootstrap(d, never, BootstrapConfig(replicates=5), point={"k": 1.0})


def test_config_validation():
    with pytest.raises(ValueError):
        BootstrapConfig(replicates=1)
    with pytest.raises(ValueError):
        BootstrapConfig(ci="bca")
    with pytest.raises(ValueError):
        BootstrapConfig(level=1.0)


def test_coverage_counts():
    ivs = [IntervalEstimate(0, 1, -1, 1, 10, 0), IntervalEstimate(0, 1, 0.5, 2, 10, 0)]
    assert coverage(ivs, 0.0) == 0.5
    with pytest.raises(ValueError):
        coverage([], 0.0)
