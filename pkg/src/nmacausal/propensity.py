"""Generalized propensity scores ``g_a(W) = P(a in A_i | W_i)``.

One binary model per treatment is fitted across studies (one row per study):
the response is whether the study has an arm with that treatment.  Scores can
be truncated from below at a nearest-rank percentile of the fitted scores.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.special import expit

from .data_model import ArmTable, CovariateVector, Dataset, TreatmentCode
from .glm import (
    ETA_CAP,
    DesignMatrix,
    FitResult,
    _logistic_batch,
    fit_lasso_logistic,
    select_lasso_lambda,
)

__all__ = [
    "PropensityKind",
    "PropensitySpec",
    "PropensityModel",
    "PositivityReport",
    "POSITIVITY_THRESHOLDS",
    "fit_propensity",
    "score",
    "truncate",
    "positivity_report",
    "study_design",
]

POSITIVITY_THRESHOLDS = (0.025, 0.05, 0.10)


class PropensityKind(str, Enum):
    LOGISTIC = "logistic"
    LASSO = "lasso_logistic"


@dataclass(frozen=True)
class PropensitySpec:
    """How to fit the propensity models.

    ``lambda_policy`` is ``"cv"`` (leave-one-study-out deviance over a
    50-point grid) or a fixed penalty; a mapping from treatment id to penalty
    pins each model separately.
    """

    kind: PropensityKind = PropensityKind.LOGISTIC
    covariates: tuple[str, ...] | None = None
    interactions: bool = False
    truncation: float | None = None
    lambda_policy: str | float | dict = "cv"

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", PropensityKind(self.kind))
        if self.truncation is not None and not 0.0 < self.truncation < 0.5:
            raise ValueError("truncation percentile must lie in (0, 0.5)")


def study_design(x: np.ndarray, names: Sequence[str], covariates: Sequence[str] | None = None,
                 interactions: bool = False) -> DesignMatrix:
    """Intercept, main effects and (optionally) pairwise products of study covariates."""
    names = list(names)
    use = list(names) if covariates is None else list(covariates)
    cols = {"intercept": np.ones(x.shape[0])}
    for c in use:
        cols[c] = x[:, names.index(c)]
    if interactions:
        for i, a in enumerate(use):
            for b in use[i + 1:]:
                cols[f"{a}:{b}"] = cols[a] * cols[b]
    return DesignMatrix(np.column_stack(list(cols.values())), tuple(cols))


def truncate(scores, p: float) -> np.ndarray:
    """Raise scores below the nearest-rank ``p`` quantile up to that quantile."""
    s = np.asarray(scores, dtype=float)
    if not 0.0 < p < 0.5:
        raise ValueError("truncation percentile must lie in (0, 0.5)")
    floor = _nearest_rank(s, np.ones_like(s), p)
    return np.maximum(s, floor)


def _nearest_rank(values: np.ndarray, counts: np.ndarray, p: float):
    """Nearest-rank percentile of a multiset given by ``values`` with
    multiplicities ``counts``; both (..., n)."""
    order = np.argsort(values, axis=-1, kind="stable")
    v = np.take_along_axis(values, order, axis=-1)
    c = np.cumsum(np.take_along_axis(counts, order, axis=-1), axis=-1)
    total = c[..., -1:]
    rank = np.maximum(np.ceil(p * total - 1e-9), 1.0)
    pos = np.argmax(c >= rank, axis=-1)[..., None]
    return np.take_along_axis(v, pos, axis=-1)[..., 0]


@dataclass(frozen=True)
class PropensityBatch:
    """Scores for a stack of study-weight vectors.

    ``g`` has shape (B, K, N) for the K requested treatments.  ``absent``
    marks replicates where a treatment is in no weighted study, ``saturated``
    where it is in every one, ``separated`` where the logistic fit separated.
    """

    g: np.ndarray
    absent: np.ndarray
    saturated: np.ndarray
    separated: np.ndarray
    failed: np.ndarray
    coef: np.ndarray


def propensity_batch(table: ArmTable, spec: PropensitySpec, sw: np.ndarray,
                     treatment_ids: Sequence[int], lambdas: dict | None = None) -> PropensityBatch:
    D = study_design(table.x, table.covariate_names, spec.covariates, spec.interactions)
    X = D.values
    sw = np.atleast_2d(np.asarray(sw, dtype=float))
    B, N = sw.shape
    ids = list(treatment_ids)
    y = table.contains[:, ids].T.astype(float)  # (K, N)
    live = sw > 0
    n_with = (live[:, None, :] & (y[None] > 0)).sum(-1)
    n_live = live.sum(-1)[:, None]
    absent = n_with == 0
    saturated = (n_with == n_live) & ~absent
    wk = np.broadcast_to(sw[:, None, :], (B, len(ids), N))
    if spec.kind is PropensityKind.LOGISTIC:
        res = _logistic_batch(X, y[None], wk)
        coef = res["beta"]
        eta = np.clip(coef @ X.T, -ETA_CAP, ETA_CAP)
        separated = res["separated"] & ~saturated & ~absent
        failed = ~res["ok"] & ~saturated & ~absent
    else:
        coef = np.zeros((B, len(ids), X.shape[1]))
        separated = np.zeros((B, len(ids)), dtype=bool)
        failed = np.zeros((B, len(ids)), dtype=bool)
        for k, a in enumerate(ids):
            lam = None
            for b in range(B):
                if absent[b, k] or saturated[b, k]:
                    continue
                if lam is None:
                    lam = _lambda_for(spec, lambdas, a)
                fit = fit_lasso_logistic(D, y[k], lam, wk[b, k])
                coef[b, k] = fit.coef
                separated[b, k] = fit.separated
        eta = np.clip(coef @ X.T, -ETA_CAP, ETA_CAP)
    g = expit(eta)
    g = np.where(saturated[..., None], 1.0, g)
    if spec.truncation is not None:
        floor = _nearest_rank(g, np.broadcast_to(sw[:, None, :], g.shape), spec.truncation)
        g = np.maximum(g, floor[..., None])
    return PropensityBatch(g, absent, saturated, separated, failed, coef)


def _lambda_for(spec: PropensitySpec, lambdas: dict | None, a: int) -> float:
    if lambdas is not None and a in lambdas:
        return float(lambdas[a])
    pol = spec.lambda_policy
    if isinstance(pol, dict):
        return float(pol[a])
    if isinstance(pol, (int, float)):
        return float(pol)
    raise ValueError("lasso penalty not resolved; select it on the full sample first")


@dataclass(frozen=True)
class PropensityModel:
    fits: dict[int, FitResult | None]
    kind: PropensityKind
    truncation: float | None
    treatments: tuple[TreatmentCode, ...]
    design_columns: tuple[str, ...]
    covariate_names: tuple[str, ...]
    spec: PropensitySpec
    floors: dict[int, float] = field(default_factory=dict)
    saturated: frozenset[int] = frozenset()
    separated: frozenset[int] = frozenset()
    lambdas: dict[int, float] = field(default_factory=dict)
    warnings: tuple[str, ...] = ()

    def raw_scores(self, x: np.ndarray, a: int) -> np.ndarray:
        if a not in self.fits:
            raise KeyError(f"no propensity model for treatment id {a}")
        if a in self.saturated:
            return np.ones(x.shape[0])
        D = study_design(x, self.covariate_names, self.spec.covariates, self.spec.interactions)
        return expit(np.clip(D.values @ self.fits[a].coef, -ETA_CAP, ETA_CAP))

    def scores(self, x: np.ndarray, a: int) -> np.ndarray:
        s = self.raw_scores(x, a)
        if self.truncation is not None:
            s = np.maximum(s, self.floors[a])
        return s

    def fixed_spec(self) -> PropensitySpec:
        """Spec with penalties pinned at the selected values."""
        if self.kind is PropensityKind.LASSO:
            return PropensitySpec(self.spec.kind, self.spec.covariates, self.spec.interactions,
                                  self.spec.truncation, dict(self.lambdas))
        return self.spec


def _resolve(treatment, d_or_labels) -> int:
    if isinstance(treatment, TreatmentCode):
        return treatment.id
    if isinstance(treatment, str):
        return d_or_labels.index(treatment)
    return int(treatment)


def fit_propensity(d: Dataset, kind: PropensityKind | str = PropensityKind.LOGISTIC,
                   lambda_policy: str | float = "cv", truncation: float | None = None,
                   covariates: Sequence[str] | None = None, interactions: bool = False,
                   treatments: Sequence[TreatmentCode | int | str] | None = None) -> PropensityModel:
    """Fit one propensity model per treatment (all registered ones by default)."""
    spec = PropensitySpec(PropensityKind(kind), None if covariates is None else tuple(covariates),
                          interactions, truncation, lambda_policy)
    return fit_propensity_spec(d, spec, treatments)


def fit_propensity_spec(d: Dataset, spec: PropensitySpec,
                        treatments: Sequence[TreatmentCode | int | str] | None = None) -> PropensityModel:
    if d.n_studies < 2:
        raise ValueError("propensity models need at least two studies")
    table = d.table
    labels = list(table.treatment_labels)
    ids = sorted({_resolve(t, labels) for t in treatments}) if treatments is not None else list(range(len(labels)))
    D = study_design(table.x, table.covariate_names, spec.covariates, spec.interactions)
    lambdas: dict[int, float] = {}
    notes = []
    if spec.kind is PropensityKind.LASSO:
        groups = np.arange(d.n_studies)
        for a in ids:
            y = table.contains[:, a].astype(float)
            if 0 < y.sum() < len(y):
                if spec.lambda_policy == "cv":
                    lambdas[a], _, _ = select_lasso_lambda(D, y, groups)
                else:
                    lambdas[a] = _lambda_for(spec, None, a)
    batch = propensity_batch(table, PropensitySpec(spec.kind, spec.covariates, spec.interactions, None,
                                                   spec.lambda_policy), np.ones((1, d.n_studies)), ids, lambdas)
    fits: dict[int, FitResult | None] = {}
    saturated, separated = set(), set()
    for k, a in enumerate(ids):
        label = labels[a]
        if batch.absent[0, k]:
            notes.append(f"treatment {label} appears in no study; its score is identically 0")
            fits[a] = FitResult(np.full(D.shape[1], np.nan), D.columns, False, 0, math.nan)
            continue
        if batch.saturated[0, k]:
            saturated.add(a)
            notes.append(f"treatment {label} appears in every study; score set to 1")
            fits[a] = None
            continue
        if batch.failed[0, k]:
            raise np.linalg.LinAlgError(f"propensity design for {label} is rank deficient")
        if batch.separated[0, k]:
            separated.add(a)
            notes.append(f"propensity model for {label} separates the studies")
        fits[a] = FitResult(batch.coef[0, k], D.columns, not batch.separated[0, k], 0, math.nan,
                            bool(batch.separated[0, k]), extra={"lambda": lambdas.get(a)})
    for msg in notes:
        warnings.warn(msg, stacklevel=2)
    model = PropensityModel(fits, spec.kind, spec.truncation,
                            tuple(d.treatments[a] for a in ids), D.columns, table.covariate_names,
                            spec, {}, frozenset(saturated), frozenset(separated), lambdas, tuple(notes))
    if spec.truncation is not None:
        floors = {}
        for a in ids:
            if fits[a] is not None and not np.isnan(fits[a].coef).any():
                floors[a] = float(_nearest_rank(model.raw_scores(table.x, a), np.ones(d.n_studies),
                                                spec.truncation))
            else:
                floors[a] = 1.0 if a in saturated else 0.0
        object.__setattr__(model, "floors", floors)
    return model


def score(m: PropensityModel, W: CovariateVector | Sequence[float], a: TreatmentCode | int | str) -> float:
    """Score of one covariate vector; truncated when the model is."""
    labels = [t.label for t in m.treatments]
    if isinstance(a, str):
        if a not in labels:
            raise KeyError(f"no propensity model for treatment {a!r}")
        a = m.treatments[labels.index(a)].id
    a = a.id if isinstance(a, TreatmentCode) else int(a)
    x = (W.as_array() if isinstance(W, CovariateVector) else np.asarray(W, dtype=float))[None, :]
    return float(m.scores(x, a)[0])


@dataclass(frozen=True)
class PositivityReport:
    treatments: tuple[str, ...]
    minimum: dict[str, float]
    maximum: dict[str, float]
    counts_below: dict[str, dict[float, int]]
    flagged: tuple[tuple[str, str, float], ...]
    thresholds: tuple[float, ...] = POSITIVITY_THRESHOLDS

    def to_text(self) -> str:
        head = f"{'treatment':<14}{'min':>10}{'max':>10}" + "".join(f"{'<' + format(t, 'g'):>9}" for t in self.thresholds)
        lines = ["Estimated generalized propensity scores P(a in A_i | W_i)", "", head, "-" * len(head)]
        for t in self.treatments:
            lines.append(
                f"{t:<14}{self.minimum[t]:>10.4f}{self.maximum[t]:>10.4f}"
                + "".join(f"{self.counts_below[t][th]:>9d}" for th in self.thresholds)
            )
        lines.append("")
        if self.flagged:
            lines.append(f"Studies with a score below {max(self.thresholds):g}:")
            for sid, t, s in self.flagged:
                lines.append(f"  study {sid:<10} {t:<14} {s:.4f}")
        else:
            lines.append(f"No study has a score below {max(self.thresholds):g}.")
        return "\n".join(lines) + "\n"


def positivity_report(m: PropensityModel, d: Dataset) -> PositivityReport:
    table = d.table
    labels, mins, maxs, counts, flagged = [], {}, {}, {}, []
    top = max(POSITIVITY_THRESHOLDS)
    for t in m.treatments:
        fit = m.fits[t.id]
        if fit is not None and np.isnan(fit.coef).any():
            continue
        s = m.scores(table.x, t.id)
        labels.append(t.label)
        mins[t.label] = float(s.min())
        maxs[t.label] = float(s.max())
        counts[t.label] = {th: int(np.sum(s < th)) for th in POSITIVITY_THRESHOLDS}
        flagged.extend((d.studies[i].study_id, t.label, float(s[i])) for i in np.flatnonzero(s < top))
    return PositivityReport(tuple(labels), mins, maxs, counts, tuple(flagged))
