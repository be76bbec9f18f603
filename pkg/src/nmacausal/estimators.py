"""Estimators of the treatment-specific metapopulation mean ``M^a``.

Four estimators share one implementation: unadjusted arm averaging,
G-computation (standardization over the study covariate distribution),
inverse probability of treatment weighting with the generalized propensity
score, and TMLE with a logistic fluctuation of the initial outcome-model
predictions.  TMLE optionally uses a model for the probability that an arm's
outcome is observed.

Internally every estimator takes a ``(B, N)`` stack of study weights, so a
single call evaluates the point estimate (a row of ones) or all
cluster-bootstrap replicates (rows of study multiplicities).  The public
``estimate_*`` functions run one row and raise on failure; :class:`Pipeline`
runs many rows and reports failures as NaN.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, logit

from .data_model import ArmTable, Dataset, OutcomeKind, TargetKind, TargetParameter, TreatmentCode
from .glm import (
    ETA_CAP,
    DesignMatrix,
    FitResult,
    _fluctuation_batch,
    _loglink_batch,
    _logistic_batch,
    _wls_batch,
    fit_lasso_logistic,
    select_lasso_lambda,
)
from .propensity import (
    PropensityKind,
    PropensityModel,
    PropensitySpec,
    fit_propensity_spec,
    propensity_batch,
)

__all__ = [
    "Link",
    "WeightConvention",
    "Method",
    "OutcomeModelSpec",
    "MissingnessSpec",
    "MissingnessModel",
    "EstimateReport",
    "EstimatorSpec",
    "Pipeline",
    "EstimationError",
    "PositivityError",
    "BoundsError",
    "ContrastError",
    "BOUNDARY_DELTA",
    "EMPIRICAL_WIDEN",
    "arm_weights",
    "outcome_bounds",
    "fit_missingness",
    "estimate_unadjusted",
    "estimate_gcomp",
    "estimate_iptw",
    "estimate_tmle",
    "estimate_fe_arm_ratio",
    "eif_residual",
    "contrast",
    "resolve_targets",
]

BOUNDARY_DELTA = 1e-6
EMPIRICAL_WIDEN = 0.10


class EstimationError(RuntimeError):
    """An estimator could not produce a value for the requested target."""


class PositivityError(EstimationError):
    pass


class BoundsError(EstimationError):
    pass


class ContrastError(ArithmeticError):
    pass


class Link(str, Enum):
    IDENTITY = "identity"
    LOGIT = "logit"


class WeightConvention(str, Enum):
    N_OVER_S2 = "n_over_s2"
    INV_S2 = "inv_s2"
    INV_SE = "inv_se"
    N = "n"
    NONE = "none"


class Method(str, Enum):
    UNADJUSTED = "unadjusted"
    GCOMP = "gcomp"
    IPTW = "iptw"
    TMLE = "tmle"
    FE_ARM = "fe_arm_loglink"


@dataclass(frozen=True)
class OutcomeModelSpec:
    """Pooled arm-level outcome regression.

    The design is an intercept, treatment indicators (first treatment as
    reference), the study covariates and, with ``interactions``, the
    treatment-by-covariate products.  ``bounds`` is ``"natural"`` (0, 1),
    ``"empirical"`` (observed range widened by ``widen`` times the range on
    each side) or an explicit ``(lower, upper)``; ``None`` picks natural for
    binary outcomes and empirical otherwise.  The bounds scale the outcome for
    the logit link and for the TMLE fluctuation.  Outcomes landing exactly on
    data-derived bounds are nudged inside by ``BOUNDARY_DELTA``; user bounds
    must strictly contain the data.
    """

    link: Link = Link.IDENTITY
    covariates: tuple[str, ...] | None = None
    interactions: bool = False
    weights: WeightConvention = WeightConvention.N_OVER_S2
    bounds: str | tuple[float, float] | None = None
    include_treatment: bool = True
    widen: float = EMPIRICAL_WIDEN

    def __post_init__(self) -> None:
        if not (self.widen >= 0 and math.isfinite(self.widen)):
            raise ValueError("widen must be a finite non-negative fraction")
        object.__setattr__(self, "link", Link(self.link))
        object.__setattr__(self, "weights", WeightConvention(self.weights))
        if self.covariates is not None:
            object.__setattr__(self, "covariates", tuple(self.covariates))
        b = self.bounds
        if isinstance(b, str):
            if b not in ("natural", "empirical"):
                raise ValueError(f"unknown bounds policy {b!r}")
        elif b is not None:
            lo, hi = (float(v) for v in b)
            if not lo < hi:
                raise ValueError("user bounds need lower < upper")
            object.__setattr__(self, "bounds", (lo, hi))


@dataclass(frozen=True)
class MissingnessSpec:
    kind: PropensityKind = PropensityKind.LOGISTIC
    covariates: tuple[str, ...] | None = None
    lambda_policy: str | float = "cv"

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", PropensityKind(self.kind))
        if self.covariates is not None:
            object.__setattr__(self, "covariates", tuple(self.covariates))


@dataclass(frozen=True)
class MissingnessModel:
    """Model of P(outcome observed | W_i, treatment) fitted on arm rows."""

    spec: MissingnessSpec
    fit: FitResult | None
    columns: tuple[str, ...]
    lam: float | None = None

    def observed_probability(self, table: ArmTable, a: int) -> np.ndarray:
        return _missingness_batch(table, self.spec, np.ones((1, table.n_studies)), [a], self.lam)[0][0, 0]

    def fixed_spec(self) -> MissingnessSpec:
        if self.spec.kind is PropensityKind.LASSO and self.lam is not None:
            return replace(self.spec, lambda_policy=self.lam)
        return self.spec


@dataclass(frozen=True)
class EstimateReport:
    estimator: str
    means: dict[str, float]
    contrasts: dict[str, float]
    targets: tuple[TargetParameter, ...]
    n_studies: int
    n_arms: int
    diagnostics: dict = field(default_factory=dict, compare=False)

    def value(self, target: TargetParameter | str) -> float:
        label = target.label if isinstance(target, TargetParameter) else target
        if label in self.contrasts:
            return self.contrasts[label]
        return self.means[label.removeprefix("M[").removesuffix("]")]


# --------------------------------------------------------------------------- helpers


def resolve_targets(targets, d: Dataset | ArmTable) -> tuple[TargetParameter, ...]:
    if isinstance(d, ArmTable):
        codes = [TreatmentCode(i, lab) for i, lab in enumerate(d.treatment_labels)]

        class _Lookup:
            def treatment(self, key):
                for t in codes:
                    if t.label == key or t.id == key or t == key:
                        return t
                raise KeyError(f"unknown treatment {key!r}")

        lookup = _Lookup()
    else:
        lookup = d
    out = []
    for t in targets:
        if isinstance(t, TargetParameter):
            out.append(t)
        elif isinstance(t, str):
            out.append(TargetParameter.parse(t, lookup))
        else:
            out.append(TargetParameter(TargetKind.TREATMENT_MEAN, lookup.treatment(t)))
    kind = d.outcome_kind
    for t in out:
        if t.kind is TargetKind.RISK_RATIO and kind is not OutcomeKind.BINARY:
            raise ValueError(f"risk ratio {t.label} requires a binary outcome")
    return tuple(out)


def _target_ids(targets: Sequence[TargetParameter]) -> list[int]:
    ids = []
    for t in targets:
        for c in (t.a, t.b):
            if c is not None and c.id not in ids:
                ids.append(c.id)
    return ids


def arm_weights(table: ArmTable, convention: WeightConvention, sw: np.ndarray | None = None) -> np.ndarray:
    """Per-arm regression weights (observed arms only, in arm order).

    ``n_over_s2`` is N/S^2, ``inv_s2`` is 1/S^2, ``inv_se`` is the inverse
    standard error of the arm mean sqrt(N)/S, ``n`` is N and ``none`` is 1.

    Arms with a zero standard deviation get the largest finite weight among
    the arms in play (those with positive study weight).
    """
    convention = WeightConvention(convention)
    obs = table.observed
    n = table.n[obs]
    s2 = table.sd[obs] ** 2
    if convention is WeightConvention.NONE:
        w = np.ones_like(n)
    elif convention is WeightConvention.N:
        w = n.copy()
    else:
        num = n if convention is WeightConvention.N_OVER_S2 else np.ones_like(n)
        with np.errstate(divide="ignore"):
            w = np.where(s2 > 0, num / np.where(s2 > 0, s2, 1.0), np.inf)
        if convention is WeightConvention.INV_SE:
            w = np.sqrt(n * w)
    if sw is None:
        sw = np.ones((1, table.n_studies))
    sw = np.atleast_2d(sw)
    w = np.broadcast_to(w, (sw.shape[0], w.shape[0])).copy()
    if np.isinf(w).any():
        in_play = sw[:, table.study[obs]] > 0
        finite = np.where(np.isfinite(w) & in_play, w, -np.inf).max(axis=1, keepdims=True)
        finite = np.where(np.isfinite(finite), finite, 1.0)
        w = np.where(np.isinf(w), finite, w)
    return w


def outcome_bounds(table: ArmTable, policy, sw: np.ndarray | None = None,
                   widen: float = EMPIRICAL_WIDEN) -> np.ndarray:
    """(B, 2) scaling bounds for each weight row."""
    if sw is None:
        sw = np.ones((1, table.n_studies))
    sw = np.atleast_2d(sw)
    B = sw.shape[0]
    if policy is None:
        policy = "natural" if table.outcome_kind is OutcomeKind.BINARY else "empirical"
    if policy == "natural":
        if table.outcome_kind is not OutcomeKind.BINARY:
            raise BoundsError("natural (0, 1) bounds apply to binary outcomes only")
        return np.tile([0.0, 1.0], (B, 1))
    if policy == "empirical":
        obs = table.observed
        y = table.ybar[obs]
        live = sw[:, table.study[obs]] > 0
        lo = np.where(live, y, np.inf).min(axis=1)
        hi = np.where(live, y, -np.inf).max(axis=1)
        rng = hi - lo
        rng = np.where(rng > 0, rng, 1.0)
        return np.column_stack([lo - widen * rng, hi + widen * rng])
    lo, hi = policy
    return np.tile([float(lo), float(hi)], (B, 1))


def _outcome_columns(table: ArmTable, spec: OutcomeModelSpec) -> list[str]:
    covs = list(table.covariate_names) if spec.covariates is None else list(spec.covariates)
    cols = ["intercept"]
    trt = [f"trt[{lab}]" for lab in table.treatment_labels[1:]] if spec.include_treatment else []
    cols += trt + covs
    if spec.interactions and spec.include_treatment:
        cols += [f"{t}:{c}" for t in trt for c in covs]
    return cols


def _outcome_design(table: ArmTable, spec: OutcomeModelSpec, study: np.ndarray, trt: np.ndarray) -> np.ndarray:
    names = list(table.covariate_names)
    covs = names if spec.covariates is None else list(spec.covariates)
    parts = [np.ones((len(study), 1))]
    dummies = None
    if spec.include_treatment:
        K = table.n_treatments
        dummies = (trt[:, None] == np.arange(1, K)[None, :]).astype(float)
        parts.append(dummies)
    C = table.x[study][:, [names.index(c) for c in covs]] if covs else np.zeros((len(study), 0))
    parts.append(C)
    if spec.interactions and dummies is not None and covs:
        parts.append((dummies[:, :, None] * C[:, None, :]).reshape(len(study), -1))
    return np.hstack(parts)


@dataclass
class _OutcomeBatch:
    pred: np.ndarray      # (B, K, N) predictions on the outcome scale
    q: np.ndarray         # (B, K, N) predictions on the (0, 1) scale
    bounds: np.ndarray    # (B, 2)
    ok: np.ndarray        # (B,)
    coef: np.ndarray      # (B, p)
    columns: list[str]


def _outcome_batch(table: ArmTable, spec: OutcomeModelSpec, sw: np.ndarray, ids: Sequence[int],
                   need_bounds: bool) -> _OutcomeBatch:
    obs = table.observed
    study_o = table.study[obs]
    X = _outcome_design(table, spec, study_o, table.treatment[obs])
    y = table.ybar[obs]
    w = arm_weights(table, spec.weights, sw) * sw[:, study_o]
    B, N = sw.shape
    if spec.link is Link.LOGIT or need_bounds:
        bounds = outcome_bounds(table, spec.bounds, sw, spec.widen)
    else:
        bounds = np.full((B, 2), np.nan)
    lo, hi = bounds[:, :1], bounds[:, 1:]
    if spec.link is Link.IDENTITY:
        beta, ok = _wls_batch(X, y, w)
    else:
        ys = (y[None, :] - lo) / (hi - lo)
        ys = _bound_response(ys, spec.bounds, table, w > 0)
        res = _logistic_batch(X, ys, w)
        beta, ok = res["beta"], res["ok"] & ~np.isnan(ys).any(axis=1)
    studies = np.arange(N)
    pred = np.empty((B, len(ids), N))
    q = np.empty_like(pred)
    with np.errstate(invalid="ignore", divide="ignore"):
        for k, a in enumerate(ids):
            Xa = _outcome_design(table, spec, studies, np.full(N, a))
            eta = beta @ Xa.T
            if spec.link is Link.IDENTITY:
                pred[:, k] = eta
                q[:, k] = (eta - lo) / (hi - lo)
            else:
                p = expit(np.clip(eta, -ETA_CAP, ETA_CAP))
                q[:, k] = p
                pred[:, k] = lo + (hi - lo) * p
    q = np.clip(q, BOUNDARY_DELTA, 1.0 - BOUNDARY_DELTA)
    return _OutcomeBatch(pred, q, bounds, ok, beta, _outcome_columns(table, spec))


def _bound_response(ys: np.ndarray, policy, table: ArmTable, live: np.ndarray) -> np.ndarray:
    """Nudge outcomes on data-derived bounds off 0/1; with user bounds,
    mark live outcomes on or outside them as NaN."""
    if not isinstance(policy, tuple):
        return np.clip(ys, BOUNDARY_DELTA, 1.0 - BOUNDARY_DELTA)
    bad = ((ys <= 0) | (ys >= 1)) & live
    return np.where(bad, np.nan, np.clip(ys, BOUNDARY_DELTA, 1.0 - BOUNDARY_DELTA))


def _arm_matrix(table: ArmTable, ids: Sequence[int]):
    """Observed a-arm outcome per study: values (N, K), observed mask (N, K)."""
    N = table.n_studies
    Y = np.full((N, len(ids)), np.nan)
    obs = np.zeros((N, len(ids)), dtype=bool)
    for k, a in enumerate(ids):
        sel = (table.treatment == a) & table.observed
        Y[table.study[sel], k] = table.ybar[sel]
        obs[table.study[sel], k] = True
    return Y, obs


def _present(table: ArmTable, sw: np.ndarray, ids: Sequence[int]) -> np.ndarray:
    """(B, K): target has an observed arm with positive weight."""
    _, obs = _arm_matrix(table, ids)
    return ((sw[:, :, None] > 0) & obs[None]).any(axis=1)


def _missingness_batch(table: ArmTable, spec: MissingnessSpec, sw: np.ndarray, ids: Sequence[int],
                       lam: float | None):
    """(B, K, N) probability of an observed outcome; plus a failure mask (B,)."""
    ospec = OutcomeModelSpec(covariates=spec.covariates)
    X = _outcome_design(table, ospec, table.study, table.treatment)
    y = table.observed.astype(float)
    w = sw[:, table.study]
    B, N = sw.shape
    live = w > 0
    n_obs = (live & (y[None] > 0)).sum(1)
    all_obs = n_obs == live.sum(1)
    fail = n_obs == 0
    if spec.kind is PropensityKind.LOGISTIC:
        res = _logistic_batch(X, y, w)
        beta = res["beta"]
        fail |= ~res["ok"] & ~all_obs
    else:
        if lam is None:
            raise ValueError("lasso missingness penalty not resolved")
        beta = np.zeros((B, X.shape[1]))
        D = DesignMatrix(X, tuple(_outcome_columns(table, ospec)))
        for b in range(B):
            if all_obs[b] or fail[b]:
                continue
            beta[b] = fit_lasso_logistic(D, y, lam, w[b]).coef
    studies = np.arange(N)
    pi = np.empty((B, len(ids), N))
    for k, a in enumerate(ids):
        Xa = _outcome_design(table, ospec, studies, np.full(N, a))
        pi[:, k] = expit(np.clip(beta @ Xa.T, -ETA_CAP, ETA_CAP))
    pi = np.where(all_obs[:, None, None], 1.0, pi)
    return pi, fail


def fit_missingness(d: Dataset, spec: MissingnessSpec = MissingnessSpec()) -> MissingnessModel:
    """Fit P(observed | W, treatment) over all arms (one row per arm)."""
    table = d.table
    ospec = OutcomeModelSpec(covariates=spec.covariates)
    cols = tuple(_outcome_columns(table, ospec))
    X = _outcome_design(table, ospec, table.study, table.treatment)
    y = table.observed.astype(float)
    if y.all():
        return MissingnessModel(spec, None, cols)
    if not y.any():
        raise EstimationError("no arm has an observed outcome")
    D = DesignMatrix(X, cols)
    lam = None
    if spec.kind is PropensityKind.LASSO:
        lam = (select_lasso_lambda(D, y, table.study)[0] if spec.lambda_policy == "cv"
               else float(spec.lambda_policy))
        fit = fit_lasso_logistic(D, y, lam)
    else:
        res = _logistic_batch(X, y, np.ones_like(y))
        fit = FitResult(res["beta"], cols, bool(res["converged"]), int(res["iterations"]),
                        float(res["deviance"]), bool(res["separated"]))
    return MissingnessModel(spec, fit, cols, lam)


# --------------------------------------------------------------------------- estimator cores


def _unadjusted_means(table: ArmTable, sw: np.ndarray, ids: Sequence[int], convention: str = "arm"):
    Y, obs = _arm_matrix(table, ids)
    Yz = np.where(obs, Y, 0.0)
    if convention == "arm":
        num = sw @ Yz
        den = sw @ obs.astype(float)
    elif convention == "pooled":
        nmat = np.zeros_like(Yz)
        for k, a in enumerate(ids):
            sel = (table.treatment == a) & table.observed
            nmat[table.study[sel], k] = table.n[sel]
        num = sw @ (Yz * nmat)
        den = sw @ nmat
    else:
        raise ValueError(f"unknown averaging convention {convention!r}")
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


def _weighted_study_mean(values: np.ndarray, sw: np.ndarray) -> np.ndarray:
    """Mean over studies of (B, K, N) values with (B, N) weights."""
    return np.einsum("bkn,bn->bk", values, sw) / sw.sum(axis=1, keepdims=True)


@dataclass
class _BatchResult:
    means: np.ndarray                       # (B, K)
    failed: np.ndarray                      # (B, K)
    diag: dict = field(default_factory=dict)


def _gcomp_core(table, spec, sw, ids) -> _BatchResult:
    ob = _outcome_batch(table, spec, sw, ids, need_bounds=False)
    means = _weighted_study_mean(ob.pred, sw)
    failed = ~ob.ok[:, None] | ~_present(table, sw, ids) | ~np.isfinite(means)
    return _BatchResult(means, failed, {"outcome": ob})


def _iptw_core(table, g, pi, sw, ids, hajek=False) -> _BatchResult:
    Y, obs = _arm_matrix(table, ids)
    Yt = np.where(obs, Y, 0.0).T[None]          # (1, K, N)
    dens = g if pi is None else g * pi
    with np.errstate(divide="ignore", invalid="ignore"):
        contrib = np.where(obs.T[None], Yt / dens, 0.0)
        num = np.einsum("bkn,bn->bk", contrib, sw)
        if hajek:
            den = np.einsum("bkn,bn->bk", np.where(obs.T[None], 1.0 / dens, 0.0), sw)
        else:
            den = sw.sum(axis=1, keepdims=True)
        means = num / den
    zero_g = ((dens <= 0) & obs.T[None] & (sw[:, None, :] > 0)).any(axis=2)
    failed = zero_g | ~_present(table, sw, ids) | ~np.isfinite(means)
    return _BatchResult(means, failed, {"zero_score": zero_g})


def _tmle_core(table, spec, g, pi, sw, ids) -> _BatchResult:
    ob = _outcome_batch(table, spec, sw, ids, need_bounds=True)
    Y, obs = _arm_matrix(table, ids)
    lo, hi = ob.bounds[:, 0], ob.bounds[:, 1]
    with np.errstate(invalid="ignore"):
        ys = (Y.T[None] - lo[:, None, None]) / (hi - lo)[:, None, None]   # (B, K, N)
    live = obs.T[None] & (sw[:, None, :] > 0)
    ys = _bound_response(ys, spec.bounds, table, live)
    bounds_bad = (np.isnan(ys) & live).any(axis=2)
    ys = np.where(obs.T[None] & ~np.isnan(ys), ys, 0.5)
    dens = g if pi is None else g * pi
    with np.errstate(divide="ignore"):
        H = 1.0 / dens
    Hfin = np.isfinite(H)
    H = np.where(Hfin, H, 0.0)
    offset = logit(ob.q)
    wfl = np.where(obs.T[None], sw[:, None, :], 0.0)
    eps, score, iters, done = _fluctuation_batch(ys, offset, H, wfl)
    q_star = expit(offset + eps[..., None] * H)
    m_star = _weighted_study_mean(q_star, sw)
    means = lo[:, None] + (hi - lo)[:, None] * m_star
    eif = _eif_mean(ys, q_star, H, obs.T[None], sw, m_star)
    inf_h = (~Hfin & (sw[:, None, :] > 0)).any(axis=2)
    failed = (~ob.ok[:, None] | ~_present(table, sw, ids) | bounds_bad | inf_h | ~done
              | ~np.isfinite(means))
    return _BatchResult(means, failed, {
        "outcome": ob, "epsilon": eps, "score": score, "eif": eif, "q_star": q_star,
        "H": H, "ys": ys, "bounds_bad": bounds_bad, "fluct_done": done, "zero_score": inf_h,
    })


def _fe_arm_core(table, sw, ids) -> _BatchResult:
    """Arm-level log-link regression with study fixed intercepts.

    ``means`` holds exp(treatment effect) relative to the first treatment,
    so only ratios of them are meaningful.
    """
    obs = table.observed
    study_o = table.study[obs]
    N, K = table.n_studies, table.n_treatments
    X = np.hstack([(study_o[:, None] == np.arange(N)[None, :]).astype(float),
                   (table.treatment[obs][:, None] == np.arange(1, K)[None, :]).astype(float)])
    w = table.n[obs][None, :] * sw[:, study_o]
    beta, ok, conv = _loglink_batch(X, table.ybar[obs], w)
    effects = np.hstack([np.zeros((sw.shape[0], 1)), beta[:, N:]])
    means = np.exp(effects[:, ids])
    failed = ~(ok & conv)[:, None] | ~_present(table, sw, ids)
    return _BatchResult(means, failed, {"coef": beta})


def _eif_mean(ys, q, H, obs, sw, m):
    """Empirical mean over studies of the (scaled) efficient influence function."""
    resid = np.where(obs, H * (ys - q), 0.0)
    per_study = resid + q - m[..., None]
    return np.einsum("bkn,bn->bk", per_study, sw) / sw.sum(axis=1, keepdims=True)


def _contrast_values(means: np.ndarray, ids: list[int], targets: Sequence[TargetParameter]):
    out = {}
    for t in targets:
        a = means[..., ids.index(t.a.id)]
        if t.kind is TargetKind.TREATMENT_MEAN:
            out[t.label] = a
            continue
        b = means[..., ids.index(t.b.id)]
        with np.errstate(divide="ignore", invalid="ignore"):
            out[t.label] = a - b if t.kind is TargetKind.MEAN_DIFFERENCE else np.where(b != 0, a / b, np.nan)
    return out


# --------------------------------------------------------------------------- public estimators


def _report(name, table, d, targets, ids, res: _BatchResult, diag) -> EstimateReport:
    labels = table.treatment_labels
    means = {labels[a]: float(res.means[0, k]) for k, a in enumerate(ids)}
    cons = {k: float(v[0]) for k, v in _contrast_values(res.means, ids, targets).items()
            if "/" in k or "-" in k}
    for t in targets:
        if t.kind is TargetKind.RISK_RATIO and not cons[t.label] > 0:
            raise ContrastError(f"risk ratio {t.label} is not positive")
    return EstimateReport(name, means, cons, tuple(targets), d.n_studies, d.n_arms, diag)


def _require_present(table, ids, name):
    present = _present(table, np.ones((1, table.n_studies)), ids)[0]
    for k, a in enumerate(ids):
        if not present[k]:
            raise EstimationError(f"{name}: treatment {table.treatment_labels[a]} has no observed arm")


def estimate_unadjusted(d: Dataset, targets, convention: str = "arm") -> EstimateReport:
    """Treatment means as plain averages of the observed arm means.

    ``convention="pooled"`` pools patients instead (sum of n * mean over sum of n).
    """
    targets = resolve_targets(targets, d)
    table = d.table
    ids = _target_ids(targets)
    _require_present(table, ids, "unadjusted")
    means = _unadjusted_means(table, np.ones((1, d.n_studies)), ids, convention)
    return _report("unadjusted", table, d, targets, ids, _BatchResult(means, np.isnan(means)),
                   {"convention": convention})


def estimate_gcomp(d: Dataset, spec: OutcomeModelSpec, targets) -> EstimateReport:
    """Standardize pooled outcome-model predictions over all studies."""
    targets = resolve_targets(targets, d)
    table = d.table
    ids = _target_ids(targets)
    _require_present(table, ids, "G-computation")
    res = _gcomp_core(table, spec, np.ones((1, d.n_studies)), ids)
    ob = res.diag["outcome"]
    if not ob.ok[0]:
        raise EstimationError("G-computation: outcome design is rank deficient")
    diag = {"coefficients": dict(zip(ob.columns, ob.coef[0].tolist())),
            "predictions": {table.treatment_labels[a]: ob.pred[0, k] for k, a in enumerate(ids)}}
    return _report("gcomp", table, d, targets, ids, res, diag)


def _check_propensity(pm: PropensityModel, ids, table, name):
    for a in ids:
        if a not in pm.fits:
            raise EstimationError(f"{name}: propensity model lacks treatment {table.treatment_labels[a]}")


def _model_scores(pm: PropensityModel, table: ArmTable, ids) -> np.ndarray:
    return np.stack([pm.scores(table.x, a) for a in ids])[None]


def estimate_iptw(d: Dataset, pm: PropensityModel, targets, mm: MissingnessModel | None = None,
                  hajek: bool = False) -> EstimateReport:
    """Horvitz-Thompson weighting by the generalized propensity score.

    Arms with a missing outcome are dropped unless a missingness model is
    supplied, in which case observed arms are further weighted by the
    inverse probability of observation.
    """
    targets = resolve_targets(targets, d)
    table = d.table
    ids = _target_ids(targets)
    _require_present(table, ids, "IPTW")
    _check_propensity(pm, ids, table, "IPTW")
    g = _model_scores(pm, table, ids)
    pi = None if mm is None else np.stack([mm.observed_probability(table, a) for a in ids])[None]
    if mm is None and not table.observed.all():
        warnings.warn("IPTW: arms with missing outcomes are excluded", stacklevel=2)
    res = _iptw_core(table, g, pi, np.ones((1, d.n_studies)), ids, hajek)
    if res.diag["zero_score"].any():
        raise PositivityError("IPTW: a contributing study has propensity score 0")
    diag = {"min_score": {table.treatment_labels[a]: float(g[0, k].min()) for k, a in enumerate(ids)},
            "hajek": hajek}
    return _report("iptw", table, d, targets, ids, res, diag)


def estimate_tmle(d: Dataset, spec: OutcomeModelSpec, pm: PropensityModel, targets,
                  mm: MissingnessModel | None = None) -> EstimateReport:
    """TMLE with a no-intercept logistic fluctuation on the (0, 1) scale.

    The clever covariate is ``1/g_a(W)``, or ``1/(g_a(W) * P(observed))``
    with a missingness model.  The report carries the fitted ``epsilon`` and
    the mean of the efficient influence function on the scaled outcome.
    """
    targets = resolve_targets(targets, d)
    table = d.table
    ids = _target_ids(targets)
    _require_present(table, ids, "TMLE")
    _check_propensity(pm, ids, table, "TMLE")
    g = _model_scores(pm, table, ids)
    pi = None if mm is None else np.stack([mm.observed_probability(table, a) for a in ids])[None]
    res = _tmle_core(table, spec, g, pi, np.ones((1, d.n_studies)), ids)
    dg = res.diag
    ob = dg["outcome"]
    labels = table.treatment_labels
    if not ob.ok[0]:
        raise EstimationError("TMLE: outcome design is rank deficient")
    if dg["bounds_bad"].any():
        raise BoundsError("TMLE: scaled outcomes reach the bounds; use a wider bounds policy")
    if dg["zero_score"].any():
        raise PositivityError("TMLE: clever covariate is infinite (propensity score 0)")
    if not dg["fluct_done"].all():
        raise EstimationError(f"TMLE: fluctuation did not converge (epsilon={dg['epsilon'][0].tolist()})")
    diag = {
        "epsilon": {labels[a]: float(dg["epsilon"][0, k]) for k, a in enumerate(ids)},
        "eif_residual": {labels[a]: float(dg["eif"][0, k]) for k, a in enumerate(ids)},
        "bounds": tuple(ob.bounds[0].tolist()),
        "initial_means": {labels[a]: float(_weighted_study_mean(ob.pred, np.ones((1, d.n_studies)))[0, k])
                          for k, a in enumerate(ids)},
        "scaled": {labels[a]: {"y": dg["ys"][0, k], "q": ob.q[0, k], "q_star": dg["q_star"][0, k],
                               "H": dg["H"][0, k]} for k, a in enumerate(ids)},
        "coefficients": dict(zip(ob.columns, ob.coef[0].tolist())),
        "missingness": mm is not None,
    }
    return _report("tmle", table, d, targets, ids, res, diag)


def estimate_fe_arm_ratio(d: Dataset, targets) -> EstimateReport:
    """Risk ratios from a fixed-effects (study intercept) log-link arm regression.

    A simple comparator for binary outcomes; it is not a random-effects
    model and its ``means`` are relative to the first treatment.
    """
    targets = resolve_targets(targets, d)
    if any(t.kind is not TargetKind.RISK_RATIO for t in targets):
        raise ValueError("the log-link arm regression only estimates risk ratios")
    table = d.table
    ids = _target_ids(targets)
    _require_present(table, ids, "log-link arm regression")
    res = _fe_arm_core(table, np.ones((1, d.n_studies)), ids)
    if res.failed.any():
        raise EstimationError("log-link arm regression did not converge")
    return _report("fe_arm_loglink", table, d, targets, ids, res, {"relative_means": True})


def eif_residual(report: EstimateReport, treatment: str | None = None) -> float:
    """Empirical mean of the efficient influence function recorded by TMLE
    (largest magnitude over treatments unless one is named)."""
    vals = report.diagnostics.get("eif_residual")
    if vals is None:
        raise KeyError("report carries no EIF residual (not a TMLE report)")
    if treatment is not None:
        return vals[treatment]
    return max(vals.values(), key=abs)


def contrast(report: EstimateReport, kind: TargetKind | str, a: str | TreatmentCode, b: str | TreatmentCode) -> float:
    """Difference or ratio of two fitted treatment means."""
    kind = TargetKind(kind)
    la, lb = str(a), str(b)
    try:
        ma, mb = report.means[la], report.means[lb]
    except KeyError as exc:
        raise ContrastError(f"report has no mean for {exc.args[0]}") from None
    if kind is TargetKind.MEAN_DIFFERENCE:
        return ma - mb
    if kind is TargetKind.RISK_RATIO:
        if mb == 0:
            raise ContrastError("risk ratio with a zero denominator")
        return ma / mb
    raise ContrastError("contrast kind must be a difference or a ratio")


# --------------------------------------------------------------------------- pipeline


@dataclass(frozen=True)
class EstimatorSpec:
    name: str
    method: Method
    outcome: OutcomeModelSpec | None = None
    hajek: bool = False
    convention: str = "arm"

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", Method(self.method))
        if self.method in (Method.GCOMP, Method.TMLE) and self.outcome is None:
            object.__setattr__(self, "outcome", OutcomeModelSpec())


class Pipeline:
    """Several estimators over shared propensity and missingness fits.

    Calling the pipeline on a :class:`Dataset` returns ``{"name:target":
    value}``; :meth:`evaluate` does the same for a stack of study-weight
    rows, with NaN wherever that replicate could not be estimated.  A
    replicate lacking an observed arm of any target treatment fails for
    every key.  With ``discard_separated`` a separated propensity fit fails
    the weighting estimators of that replicate.
    """

    def __init__(self, estimators: Sequence[EstimatorSpec], targets: Sequence,
                 propensity: PropensitySpec = PropensitySpec(),
                 missingness: MissingnessSpec | None = None, discard_separated: bool = False,
                 prop_lambdas: Mapping[int, float] | None = None, miss_lambda: float | None = None):
        self.estimators = tuple(estimators)
        self.targets = tuple(targets)
        self.propensity = propensity
        self.missingness = missingness
        self.discard_separated = discard_separated
        self.prop_lambdas = dict(prop_lambdas) if prop_lambdas else None
        self.miss_lambda = miss_lambda

    @property
    def keys(self) -> list[str]:
        return [f"{e.name}:{_target_label(t)}" for e in self.estimators for t in self.targets]

    def _needs_propensity(self) -> bool:
        return any(e.method in (Method.IPTW, Method.TMLE) for e in self.estimators)

    def prepare(self, d: Dataset) -> Pipeline:
        """Pin data-driven tuning (lasso penalties) at the values chosen on ``d``."""
        targets = resolve_targets(self.targets, d)
        ids = _target_ids(targets)
        lambdas, mlam = self.prop_lambdas, self.miss_lambda
        if self._needs_propensity() and self.propensity.kind is PropensityKind.LASSO and lambdas is None:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                pm = fit_propensity_spec(d, self.propensity, [d.treatments[a] for a in ids])
            lambdas = dict(pm.lambdas)
        if self.missingness is not None and self.missingness.kind is PropensityKind.LASSO and mlam is None:
            mlam = fit_missingness(d, self.missingness).lam
        return Pipeline(self.estimators, self.targets, self.propensity, self.missingness,
                        self.discard_separated, lambdas, mlam)

    def __call__(self, d: Dataset) -> dict[str, float]:
        out = self.evaluate(d.table, np.ones((1, d.n_studies)))
        return {k: float(v[0]) for k, v in out.items()}

    def evaluate(self, table: ArmTable, sw: np.ndarray) -> dict[str, np.ndarray]:
        sw = np.atleast_2d(np.asarray(sw, dtype=float))
        targets = resolve_targets(self.targets, table)
        ids = _target_ids(targets)
        present = _present(table, sw, ids).all(axis=1)
        out: dict[str, np.ndarray] = {}
        g = pi = None
        weight_fail = np.zeros(sw.shape[0], dtype=bool)
        if self._needs_propensity():
            pb = propensity_batch(table, self.propensity, sw, ids, self.prop_lambdas)
            g = pb.g
            bad = pb.absent | pb.failed
            if self.discard_separated:
                bad = bad | pb.separated
            weight_fail = bad.any(axis=1)
        miss_fail = np.zeros(sw.shape[0], dtype=bool)
        if self.missingness is not None and not table.observed.all():
            pi, miss_fail = _missingness_batch(table, self.missingness, sw, ids, self.miss_lambda)
        for e in self.estimators:
            if e.method is Method.UNADJUSTED:
                means = _unadjusted_means(table, sw, ids, e.convention)
                fail = ~np.isfinite(means).all(axis=1)
            elif e.method is Method.GCOMP:
                r = _gcomp_core(table, e.outcome, sw, ids)
                means, fail = r.means, r.failed.any(axis=1)
            elif e.method is Method.IPTW:
                r = _iptw_core(table, g, pi, sw, ids, e.hajek)
                means, fail = r.means, r.failed.any(axis=1) | weight_fail | miss_fail
            elif e.method is Method.TMLE:
                r = _tmle_core(table, e.outcome, g, pi, sw, ids)
                means, fail = r.means, r.failed.any(axis=1) | weight_fail | miss_fail
            else:
                r = _fe_arm_core(table, sw, ids)
                means, fail = r.means, r.failed.any(axis=1)
            fail = fail | ~present
            for t, (label, vals) in zip(targets, _contrast_values(means, ids, targets).items()):
                if e.method is Method.FE_ARM and t.kind is not TargetKind.RISK_RATIO:
                    vals = np.full_like(vals, np.nan)
                out[f"{e.name}:{label}"] = np.where(fail, np.nan, vals)
        return out


def _target_label(t) -> str:
    return t.label if isinstance(t, TargetParameter) else str(t)
