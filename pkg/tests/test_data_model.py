from __future__ import annotations

import io
import math

import numpy as np
import pytest

from nmacausal.data_model import (
    DataError,
    OutcomeKind,
    OutcomeSummary,
    TargetKind,
    TargetParameter,
    binary_sd,
    read_csv,
    validate_dataset,
    write_csv,
)
from nmacausal.cli import MRSA_TREATMENTS

from conftest import continuous


def test_binary_sd_from_counts():
    # 42 events of 48
    assert binary_sd(42 / 48) == pytest.approx(math.sqrt(0.875 * 0.125), abs=1e-15)
    assert binary_sd(42 / 48) == pytest.approx(0.3307, abs=1e-4)
    o = OutcomeSummary.binary(48, events=42)
    assert o.mean == 0.875 and o.sd == pytest.approx(0.33071891, abs=1e-8)


@pytest.mark.parametrize("bad", [-0.1, 1.2, float("nan")])
def test_binary_sd_rejects_out_of_domain(bad):
    with pytest.raises(DataError):
        binary_sd(bad)


def test_events_above_n_rejected():
    with pytest.raises(DataError):
        OutcomeSummary.binary(10, events=11)


def test_mrsa_fixture_shape(mrsa):
    assert mrsa.n_studies == 27
    assert mrsa.n_arms == 54
    assert [t.label for t in mrsa.treatments] == list(MRSA_TREATMENTS)
    assert sum(a.outcome.missing for s in mrsa.studies for a in s.arms) == 12
    assert mrsa.covariate_names == ("year_c", "pneumonia", "confirmed_mrsa")
    assert validate_dataset(mrsa) == []


def test_csv_round_trip(mrsa, tmp_path):
    p = tmp_path / "m.csv"
    write_csv(mrsa, p)
    back = read_csv(p, treatment_labels=[t.label for t in mrsa.treatments])
    assert back == mrsa
    buf = io.StringIO()
    write_csv(back, buf)
    assert buf.getvalue() == p.read_text()


def test_csv_round_trip_continuous(sim15, tmp_path):
    p = tmp_path / "s.csv"
    write_csv(sim15, p)
    back = read_csv(p, treatment_labels=["1", "2", "3", "4"])
    assert back == sim15 and back.outcome_kind is OutcomeKind.CONTINUOUS


@pytest.mark.parametrize("text, fragment", [
    ("", "empty"),
    ("study_id,treatment_label,n\n1,A,3\n", "lacks"),
    ("study_id,treatment_label,n,mean,sd,events,missing\n1,A,x,1,1,,0\n", "not a number"),
    ("study_id,treatment_label,n,mean,sd,events,missing\n1,A,0,1,1,,0\n", ">= 1"),
    ("study_id,treatment_label,n,mean,sd,events,missing\n1,A,5,,,6,0\n", "outside"),
    ("study_id,treatment_label,n,mean,sd,events,missing\n1,A,5,,,2,2\n", "0/1"),
])
def test_csv_errors(text, fragment):
    with pytest.raises(DataError, match=fragment):
        read_csv(io.StringIO(text))


def test_covariates_must_agree_within_study():
    with pytest.raises(DataError, match="covariates differ"):
        continuous([("s1", 0.0, "A", 5, 1.0, 1.0), ("s1", 1.0, "B", 5, 1.0, 1.0)])


def test_validate_flags_duplicate_treatment():
    d = continuous([("s1", 0.0, "A", 5, 1.0, 1.0), ("s1", 0.0, "A", 5, 2.0, 1.0)])
    rules = [v.rule for v in validate_dataset(d)]
    assert rules, "duplicate treatment within a study should be a violation"


def test_subset_keeps_repeated_studies_distinct(sim15):
    sub = sim15.subset([0, 0, 3])
    ids = [s.study_id for s in sub.studies]
    assert len(set(ids)) == 3
    assert sub.studies[1].arms == sim15.studies[0].arms


def test_arm_table_layout(mrsa):
    t = mrsa.table
    assert t.x.shape == (27, 3)
    assert t.contains.sum() == 54
    assert np.isnan(t.ybar[~t.observed]).all()
    assert t.contains[:, 0].all()  # vancomycin is in every study


def test_target_parse(mrsa):
    t = TargetParameter.parse("TEL/VAN", mrsa)
    assert t.kind is TargetKind.RISK_RATIO and t.label == "TEL/VAN"
    assert TargetParameter.parse("LIN-VAN", mrsa).kind is TargetKind.MEAN_DIFFERENCE
    assert TargetParameter.parse("DAP", mrsa).label == "M[DAP]"
    with pytest.raises(KeyError):
        TargetParameter.parse("XYZ/VAN", mrsa)
