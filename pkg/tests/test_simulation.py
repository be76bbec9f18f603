from __future__ import annotations

import csv
import json
import math
from itertools import permutations

import numpy as np
import pytest
from scipy.special import expit

from nmacausal.estimators import Link, OutcomeModelSpec, estimate_iptw
from nmacausal.inference import BootstrapConfig, philox_key, replicate_generator
from nmacausal.simulation import (
    CONTRASTS,
    DgpConfig,
    draw_treatments,
    generate_dataset,
    misspecify,
    run_scenario,
    simulation_pipeline,
    true_contrasts,
    true_means,
    write_results,
)


def inclusion_probability(w):
    """P(treatment a among two sequential weighted draws without replacement)."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(len(w))
    for i, j in permutations(range(len(w)), 2):
        p = w[i] / w.sum() * w[j] / (w.sum() - w[i])
        out[i] += p
        out[j] += p
    return out


def test_true_targets():
    m = true_means(DgpConfig())
    assert m == pytest.approx({"1": 2.8, "2": 2.2, "3": 3.0, "4": 1.95})
    assert true_contrasts(DgpConfig()) == pytest.approx({"2-1": -0.6, "3-1": 0.2, "4-1": -0.85})


def test_config_validation():
    with pytest.raises(ValueError):
        DgpConfig(beta=(1, 2, 3))
    with pytest.raises(ValueError):
        DgpConfig(n_studies=0)
    with pytest.raises(ValueError):
        DgpConfig(gamma=(math.inf, 0, 0, 0))


def test_draw_treatments_first_draw_law():
    g = replicate_generator(philox_key(3), 0)
    w = np.array([0.1, 0.2, 0.3, 0.4])
    first = np.array([draw_treatments(g, w)[0] for _ in range(20000)])
    freq = np.bincount(first, minlength=4) / len(first)
    np.testing.assert_allclose(freq, w, atol=0.015)


def test_generated_structure():
    cfg = DgpConfig(n_studies=30)
    d = generate_dataset(cfg)
    assert d == generate_dataset(cfg)
    assert d.n_studies == 30 and d.n_arms == 60
    for st in d.studies:
        assert st.n_arms == 2 and len(st.treatment_ids()) == 2
        assert st.arms[0].n == st.arms[1].n >= 2
    assert d.covariate_names == ("W",)


def test_recruitment_mean():
    cfg = DgpConfig(n_studies=200)
    d = generate_dataset(cfg)
    for st in d.studies:
        w = st.covariates["W"]
        arms = sorted(st.treatment_ids())
        mu = cfg.recruitment_base * math.exp(cfg.recruitment_w * w + sum(cfg.gamma[a] for a in arms))
        assert abs(st.arms[0].n - mu) < 6 * math.sqrt(mu) + 1


def test_arm_variance_law_of_total_variance():
    # Var(Y | A) = Var(X) + Var(noise) = 4 + 1
    cfg = DgpConfig(n_studies=400, recruitment_base=50000.0)
    d = generate_dataset(cfg)
    t = d.table
    big = t.n >= 1000
    assert big.sum() > 200
    assert np.mean(t.sd[big] ** 2) == pytest.approx(5.0, rel=0.01)


def test_iptw_with_true_scores_is_consistent():
    cfg = DgpConfig(n_studies=4000, seed=5)
    d = generate_dataset(cfg)
    t = d.table
    from nmacausal.data_model import TreatmentCode
    from nmacausal.glm import FitResult
    from nmacausal.propensity import PropensityModel, PropensityKind, PropensitySpec

    class TrueScores(PropensityModel):
        def scores(self, x, a):
            return np.array([inclusion_probability(expit(np.array(cfg.treatment_logit_slopes) * w))[a]
                             for w in x[:, 0]])

    pm = TrueScores({a: FitResult(np.zeros(2), ("intercept", "W"), True, 0, 0.0) for a in range(4)},
                    PropensityKind.LOGISTIC, None, tuple(TreatmentCode(a, str(a + 1)) for a in range(4)),
                    ("intercept", "W"), ("W",), PropensitySpec())
    rep = estimate_iptw(d, pm, ["1", "2", "3", "4"])
    truth = true_means(cfg)
    for a, lab in enumerate("1234"):
        sel = (t.treatment == a)
        g = pm.scores(t.x, a)
        terms = np.zeros(d.n_studies)
        terms[t.study[sel]] = t.ybar[sel] / g[t.study[sel]]
        se = terms.std(ddof=1) / math.sqrt(d.n_studies)
        assert abs(rep.means[lab] - truth[lab]) < 4 * se


def test_misspecify():
    s = misspecify(OutcomeModelSpec())
    assert s.link is Link.LOGIT and s.bounds == "empirical" and s.widen == 0.0


def test_run_scenario_small(tmp_path):
    cfg = DgpConfig(n_studies=15)
    res = run_scenario(cfg, n_replicates=4, bootstrap=BootstrapConfig(replicates=20))
    pipe = simulation_pipeline()
    assert len(res) == len(pipe.keys)
    for r in res:
        ok = r.estimates[np.isfinite(r.estimates)]
        assert r.percent_bias == pytest.approx(100 * (ok.mean() - r.truth) / r.truth)
        assert 0.0 <= r.coverage <= 1.0
    again = run_scenario(cfg, n_replicates=4, bootstrap=BootstrapConfig(replicates=20))
    assert [r.row() for r in res] == [r.row() for r in again]
    out = write_results(res, tmp_path / "t.csv", {"seed": cfg.seed})
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == len(res) and {r["contrast"] for r in rows} == set(CONTRASTS)
    meta = json.loads((tmp_path / "t.json").read_text())
    assert meta["seed"] == cfg.seed and meta["rows"] == len(res)


def test_labels_of_specifications():
    res = run_scenario(DgpConfig(n_studies=15), n_replicates=2, bootstrap=None)
    spec = {r.estimator: r.specification for r in res}
    assert spec == {"unadjusted": "none", "gcomp": "correct", "iptw": "correct", "tmle": "correct",
                    "gcomp_mis": "misspecified", "tmle_mis": "misspecified"}
    assert all(math.isnan(r.coverage) for r in res)
