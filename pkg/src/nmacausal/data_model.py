"""Aggregate (arm-level) network meta-analysis data.

A :class:`Dataset` is a collection of :class:`Study` clusters, each holding a
study-level covariate vector and two or more :class:`ArmRecord` rows.  Every
type is an immutable dataclass so datasets can be shared freely between
bootstrap workers.

The numeric view used by the estimators is :class:`ArmTable`, built once per
dataset and cached.
"""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from os import PathLike
from typing import IO, Iterable, Sequence

import numpy as np

__all__ = [
    "OutcomeKind",
    "TargetKind",
    "TreatmentCode",
    "OutcomeSummary",
    "ArmRecord",
    "CovariateVector",
    "Study",
    "Dataset",
    "TargetParameter",
    "Violation",
    "ArmTable",
    "DataError",
    "CSV_FIXED_COLUMNS",
    "binary_sd",
    "validate_dataset",
    "write_csv",
    "read_csv",
]

BINARY_MEAN_TOL = 1e-12

CSV_FIXED_COLUMNS = ("study_id", "treatment_label", "n", "mean", "sd", "events", "missing")


class DataError(ValueError):
    """Malformed input data (schema violations, out-of-domain values)."""


class OutcomeKind(str, Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"


class TargetKind(str, Enum):
    TREATMENT_MEAN = "treatment_mean"
    MEAN_DIFFERENCE = "mean_difference"
    RISK_RATIO = "risk_ratio"


def binary_sd(mean: float) -> float:
    """Standard deviation of a Bernoulli arm with success proportion ``mean``."""
    mean = float(mean)
    if not 0.0 <= mean <= 1.0 or math.isnan(mean):
        raise DataError(f"binary arm mean must lie in [0, 1], got {mean!r}")
    return math.sqrt(mean * (1.0 - mean))


@dataclass(frozen=True)
class TreatmentCode:
    id: int
    label: str

    def __str__(self) -> str:
        return self.label


@dataclass(frozen=True)
class OutcomeSummary:
    """Outcome summary of one arm.

    ``mean`` is the arm mean (a proportion for binary outcomes), ``sd`` the arm
    standard deviation, ``events`` the event count of a binary arm.  A missing
    outcome carries none of the three.
    """

    kind: OutcomeKind
    mean: float | None = None
    sd: float | None = None
    events: int | None = None
    missing: bool = False

    @classmethod
    def continuous(cls, mean: float, sd: float) -> OutcomeSummary:
        return cls(OutcomeKind.CONTINUOUS, float(mean), float(sd))

    @classmethod
    def binary(
        cls, n: int, events: int | None = None, mean: float | None = None
    ) -> OutcomeSummary:
        """Binary summary from an event count or a proportion."""
        if events is not None:
            events = int(events)
            if events < 0 or events > n:
                raise DataError(f"events={events} outside [0, n={n}]")
            mean = events / n
        if mean is None:
            raise DataError("binary outcome needs events or mean")
        return cls(OutcomeKind.BINARY, float(mean), binary_sd(mean), events)

    @classmethod
    def missing_outcome(cls, kind: OutcomeKind) -> OutcomeSummary:
        return cls(kind, missing=True)


@dataclass(frozen=True)
class ArmRecord:
    treatment: TreatmentCode
    n: int
    outcome: OutcomeSummary


@dataclass(frozen=True)
class CovariateVector:
    names: tuple[str, ...]
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.names) != len(self.values):
            raise DataError("covariate names and values differ in length")

    @classmethod
    def from_mapping(cls, mapping: dict[str, float]) -> CovariateVector:
        return cls(tuple(mapping), tuple(mapping.values()))

    def __getitem__(self, name: str) -> float:
        return self.values[self.names.index(name)]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


@dataclass(frozen=True)
class Study:
    study_id: str
    covariates: CovariateVector
    arms: tuple[ArmRecord, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "arms", tuple(self.arms))

    @property
    def n_arms(self) -> int:
        return len(self.arms)

    def treatment_ids(self) -> set[int]:
        return {arm.treatment.id for arm in self.arms}


def _natural_key(label: str):
    return [int(tok) if tok.isdigit() else tok.lower() for tok in re.split(r"(\d+)", label)]


@dataclass(frozen=True)
class Dataset:
    studies: tuple[Study, ...]
    treatments: tuple[TreatmentCode, ...]
    outcome_kind: OutcomeKind

    def __post_init__(self) -> None:
        object.__setattr__(self, "studies", tuple(self.studies))
        object.__setattr__(self, "treatments", tuple(self.treatments))

    @classmethod
    def from_rows(
        cls,
        rows: Iterable[tuple[str, dict[str, float], str, int, OutcomeSummary]],
        outcome_kind: OutcomeKind,
        treatment_labels: Sequence[str] | None = None,
    ) -> Dataset:
        """Build a dataset from ``(study_id, covariates, label, n, outcome)`` rows.

        Treatment ids follow ``treatment_labels`` when given, otherwise the
        natural sort order of the labels seen.  Studies keep first-appearance
        order.
        """
        rows = list(rows)
        labels = list(treatment_labels) if treatment_labels is not None else sorted(
            {r[2] for r in rows}, key=_natural_key
        )
        codes = {lab: TreatmentCode(i, lab) for i, lab in enumerate(labels)}
        grouped: dict[str, tuple[dict[str, float], list[ArmRecord]]] = {}
        for study_id, cov, label, n, outcome in rows:
            if label not in codes:
                raise DataError(f"treatment {label!r} not registered")
            if study_id not in grouped:
                grouped[study_id] = (dict(cov), [])
            elif dict(cov) != grouped[study_id][0]:
                raise DataError(f"study {study_id!r}: covariates differ between arms")
            grouped[study_id][1].append(ArmRecord(codes[label], int(n), outcome))
        studies = tuple(
            Study(sid, CovariateVector.from_mapping(cov), tuple(arms))
            for sid, (cov, arms) in grouped.items()
        )
        return cls(studies, tuple(codes.values()), outcome_kind)

    @property
    def n_studies(self) -> int:
        return len(self.studies)

    @property
    def n_arms(self) -> int:
        return sum(s.n_arms for s in self.studies)

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return self.studies[0].covariates.names if self.studies else ()

    def treatment(self, key: int | str | TreatmentCode) -> TreatmentCode:
        """Look a treatment up by id, label or code."""
        if isinstance(key, TreatmentCode):
            key = key.id
        for t in self.treatments:
            if t.id == key or t.label == key:
                return t
        raise KeyError(f"unknown treatment {key!r}")

    def subset(self, study_indices: Sequence[int]) -> Dataset:
        """Dataset of the given studies (repeats allowed; repeated studies get
        distinct ids so that clusters stay separate)."""
        seen: dict[str, int] = {}
        studies = []
        for idx in study_indices:
            st = self.studies[int(idx)]
            k = seen.get(st.study_id, 0)
            seen[st.study_id] = k + 1
            studies.append(st if k == 0 else Study(f"{st.study_id}#{k}", st.covariates, st.arms))
        return Dataset(tuple(studies), self.treatments, self.outcome_kind)

    @cached_property
    def table(self) -> ArmTable:
        return ArmTable.from_dataset(self)


@dataclass(frozen=True)
class TargetParameter:
    kind: TargetKind
    a: TreatmentCode
    b: TreatmentCode | None = None

    @property
    def label(self) -> str:
        if self.kind is TargetKind.TREATMENT_MEAN:
            return f"M[{self.a.label}]"
        sep = "/" if self.kind is TargetKind.RISK_RATIO else "-"
        return f"{self.a.label}{sep}{self.b.label}"

    @classmethod
    def parse(cls, text: str, dataset: Dataset) -> TargetParameter:
        """Parse ``"A/B"`` (risk ratio), ``"A-B"`` (difference) or ``"A"`` (mean)."""
        text = text.strip()
        for sep, kind in (("/", TargetKind.RISK_RATIO), ("-", TargetKind.MEAN_DIFFERENCE)):
            if sep in text:
                left, right = (s.strip() for s in text.split(sep, 1))
                return cls(kind, dataset.treatment(left), dataset.treatment(right))
        return cls(TargetKind.TREATMENT_MEAN, dataset.treatment(text))


@dataclass(frozen=True)
class Violation:
    study_id: str
    arm_index: int | None
    rule: str
    detail: str = ""

    def __str__(self) -> str:
        where = self.study_id if self.arm_index is None else f"{self.study_id}[arm {self.arm_index}]"
        return f"{where}: {self.rule}" + (f" ({self.detail})" if self.detail else "")


def validate_dataset(d: Dataset) -> list[Violation]:
    """Check every type invariant; returns an empty list for a valid dataset."""
    out: list[Violation] = []
    ids = [t.id for t in d.treatments]
    if sorted(ids) != list(range(len(ids))):
        out.append(Violation("<dataset>", None, "treatment ids not dense", str(ids)))
    labels = [t.label for t in d.treatments]
    if len(set(labels)) != len(labels):
        out.append(Violation("<dataset>", None, "duplicate treatment label"))
    registered = set(d.treatments)
    names = d.covariate_names
    seen_ids: set[str] = set()
    for st in d.studies:
        if st.study_id in seen_ids:
            out.append(Violation(st.study_id, None, "duplicate study id"))
        seen_ids.add(st.study_id)
        if st.covariates.names != names:
            out.append(Violation(st.study_id, None, "covariate names differ", str(st.covariates.names)))
        if not all(math.isfinite(v) for v in st.covariates.values):
            out.append(Violation(st.study_id, None, "non-finite covariate"))
        if not st.arms:
            out.append(Violation(st.study_id, None, "study has no arms"))
        codes_seen: set[int] = set()
        for j, arm in enumerate(st.arms):
            if arm.treatment.id in codes_seen:
                out.append(Violation(st.study_id, j, "duplicate treatment", arm.treatment.label))
            codes_seen.add(arm.treatment.id)
            if arm.treatment not in registered:
                out.append(Violation(st.study_id, j, "unregistered treatment", arm.treatment.label))
            if arm.n < 1:
                out.append(Violation(st.study_id, j, "arm size below 1", str(arm.n)))
            out.extend(_outcome_violations(st.study_id, j, arm, d.outcome_kind))
    return out


def _outcome_violations(sid: str, j: int, arm: ArmRecord, kind: OutcomeKind) -> list[Violation]:
    o = arm.outcome
    out = []
    if o.kind is not kind:
        out.append(Violation(sid, j, "outcome kind differs from dataset", o.kind.value))
    if o.missing:
        if o.mean is not None or o.sd is not None or o.events is not None:
            out.append(Violation(sid, j, "missing outcome carries values"))
        return out
    if o.mean is None or o.sd is None or not (math.isfinite(o.mean) and math.isfinite(o.sd)):
        out.append(Violation(sid, j, "observed outcome lacks finite mean/sd"))
        return out
    if o.sd < 0:
        out.append(Violation(sid, j, "negative sd", str(o.sd)))
    if o.kind is OutcomeKind.BINARY:
        if not 0.0 <= o.mean <= 1.0:
            out.append(Violation(sid, j, "binary mean outside [0, 1]", str(o.mean)))
            return out
        if abs(o.sd - math.sqrt(o.mean * (1 - o.mean))) > BINARY_MEAN_TOL:
            out.append(Violation(sid, j, "binary sd inconsistent with mean"))
        if o.events is not None and abs(o.mean - o.events / arm.n) > BINARY_MEAN_TOL:
            out.append(Violation(sid, j, "binary mean inconsistent with events/n"))
    elif o.events is not None:
        out.append(Violation(sid, j, "events given for continuous outcome"))
    return out


@dataclass(frozen=True)
class ArmTable:
    """Flat numeric view of a dataset, one entry per arm.

    Missing outcomes appear as NaN in ``ybar``/``sd``.  ``x`` holds the study
    covariates (one row per study) and ``contains[i, a]`` marks whether study
    ``i`` has an arm with treatment ``a``.
    """

    study: np.ndarray
    treatment: np.ndarray
    n: np.ndarray
    ybar: np.ndarray
    sd: np.ndarray
    observed: np.ndarray
    x: np.ndarray
    covariate_names: tuple[str, ...]
    treatment_labels: tuple[str, ...]
    outcome_kind: OutcomeKind
    contains: np.ndarray = field(repr=False)

    @classmethod
    def from_dataset(cls, d: Dataset) -> ArmTable:
        study, trt, n, ybar, sd, obs = [], [], [], [], [], []
        for i, st in enumerate(d.studies):
            for arm in st.arms:
                study.append(i)
                trt.append(arm.treatment.id)
                n.append(arm.n)
                o = arm.outcome
                obs.append(not o.missing)
                ybar.append(np.nan if o.missing else o.mean)
                sd.append(np.nan if o.missing else o.sd)
        k = len(d.treatments)
        x = np.array([st.covariates.values for st in d.studies], dtype=float).reshape(
            d.n_studies, len(d.covariate_names)
        )
        study_a = np.array(study, dtype=int)
        trt_a = np.array(trt, dtype=int)
        contains = np.zeros((d.n_studies, k), dtype=bool)
        contains[study_a, trt_a] = True
        arrays = [np.array(v, dtype=float) for v in (n, ybar, sd)]
        for arr in (study_a, trt_a, contains, x, *arrays):
            arr.setflags(write=False)
        observed = np.array(obs, dtype=bool)
        observed.setflags(write=False)
        return cls(
            study_a, trt_a, arrays[0], arrays[1], arrays[2], observed, x,
            d.covariate_names, tuple(t.label for t in d.treatments), d.outcome_kind, contains,
        )

    @property
    def n_studies(self) -> int:
        return self.x.shape[0]

    @property
    def n_arms(self) -> int:
        return self.study.shape[0]

    @property
    def n_treatments(self) -> int:
        return len(self.treatment_labels)


# --------------------------------------------------------------------------- CSV


def _fmt(v: float | int | None) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(d: Dataset, dest: str | PathLike | IO[str]) -> None:
    """Write one row per arm in the documented arm schema."""
    own = not hasattr(dest, "write")
    fh = open(dest, "w", newline="") if own else dest
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*CSV_FIXED_COLUMNS, *d.covariate_names])
        for st in d.studies:
            for arm in st.arms:
                o = arm.outcome
                w.writerow([
                    st.study_id, arm.treatment.label, arm.n,
                    _fmt(o.mean), _fmt(o.sd), _fmt(o.events), int(o.missing),
                    *(_fmt(v) for v in st.covariates.values),
                ])
    finally:
        if own:
            fh.close()


def _parse_float(text: str, row: int, col: str) -> float | None:
    text = text.strip()
    if text == "" or text.upper() == "NA":
        return None
    try:
        return float(text)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: not a number: {text!r}") from None


def read_csv(
    src: str | PathLike | IO[str],
    outcome_kind: OutcomeKind | None = None,
    treatment_labels: Sequence[str] | None = None,
) -> Dataset:
    """Parse the arm schema.

    The outcome kind is binary when any observed row gives ``events``, unless
    ``outcome_kind`` says otherwise.  Binary rows may omit mean/sd.
    """
    if hasattr(src, "read"):
        text = src.read()
    else:
        with open(src, newline="") as fh:
            text = fh.read()
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty file: no header row") from None
    missing_cols = [c for c in CSV_FIXED_COLUMNS if c not in header]
    if missing_cols:
        raise DataError(f"header lacks required columns {missing_cols}")
    cov_names = [h for h in header if h not in CSV_FIXED_COLUMNS]
    raw = []
    for lineno, values in enumerate(reader, start=2):
        if not values or all(not v.strip() for v in values):
            continue
        if len(values) != len(header):
            raise DataError(f"row {lineno}: expected {len(header)} fields, got {len(values)}")
        raw.append((lineno, dict(zip(header, values))))
    if not raw:
        raise DataError("no data rows")

    def flag(rec: dict[str, str], lineno: int) -> bool:
        v = rec["missing"].strip()
        if v in ("", "0"):
            return False
        if v == "1":
            return True
        raise DataError(f"row {lineno}, column 'missing': expected 0/1, got {v!r}")

    if outcome_kind is None:
        has_events = any(r["events"].strip() not in ("", "NA") for _, r in raw if not flag(r, 0))
        outcome_kind = OutcomeKind.BINARY if has_events else OutcomeKind.CONTINUOUS

    rows = []
    for lineno, rec in raw:
        sid = rec["study_id"].strip()
        label = rec["treatment_label"].strip()
        if not sid or not label:
            raise DataError(f"row {lineno}: study_id and treatment_label are required")
        n = _parse_float(rec["n"], lineno, "n")
        if n is None or n != int(n):
            raise DataError(f"row {lineno}, column 'n': expected an integer")
        n = int(n)
        if n < 1:
            raise DataError(f"row {lineno}, column 'n': arm size must be >= 1")
        cov = {}
        for c in cov_names:
            v = _parse_float(rec[c], lineno, c)
            if v is None:
                raise DataError(f"row {lineno}, column {c!r}: covariate value required")
            cov[c] = v
        mean = _parse_float(rec["mean"], lineno, "mean")
        sd = _parse_float(rec["sd"], lineno, "sd")
        events = _parse_float(rec["events"], lineno, "events")
        if flag(rec, lineno):
            outcome = OutcomeSummary.missing_outcome(outcome_kind)
        elif outcome_kind is OutcomeKind.BINARY:
            if events is not None and events != int(events):
                raise DataError(f"row {lineno}, column 'events': expected an integer")
            try:
                outcome = OutcomeSummary.binary(
                    n, None if events is None else int(events), mean if events is None else None
                )
            except DataError as exc:
                raise DataError(f"row {lineno}: {exc}") from None
            if mean is not None and abs(mean - outcome.mean) > BINARY_MEAN_TOL:
                raise DataError(f"row {lineno}: mean disagrees with events/n")
        else:
            if mean is None or sd is None:
                raise DataError(f"row {lineno}: continuous outcome needs mean and sd")
            outcome = OutcomeSummary.continuous(mean, sd)
        rows.append((sid, cov, label, n, outcome))
    return Dataset.from_rows(rows, outcome_kind, treatment_labels)
