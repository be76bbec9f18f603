"""Simulated networks of two-arm trials with study-level confounding.

Each study has a Poisson covariate ``W`` that shifts both which two of four
treatments it compares and the outcome level.  Subject-level data are drawn
and reduced on the spot to arm means and standard deviations.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .data_model import Dataset, OutcomeKind, OutcomeSummary
from .estimators import (
    EstimatorSpec,
    Link,
    Method,
    OutcomeModelSpec,
    Pipeline,
)
from .inference import BootstrapConfig, cluster_bootstrap, philox_key, replicate_generator
from .propensity import PropensitySpec

__all__ = [
    "DgpConfig",
    "ScenarioResult",
    "TREATMENTS",
    "CONTRASTS",
    "true_means",
    "true_contrasts",
    "draw_treatments",
    "generate_dataset",
    "misspecify",
    "simulation_pipeline",
    "run_scenario",
    "write_results",
]

TREATMENTS = ("1", "2", "3", "4")
CONTRASTS = ("2-1", "3-1", "4-1")
_DATA_TAG = 0xDA7A
_BOOT_TAG = 0xB0


@dataclass(frozen=True)
class DgpConfig:
    n_studies: int = 50
    w_mean: float = 2.0
    treatment_logit_slopes: tuple[float, ...] = (0.4, -0.4, 0.8, -0.8)
    recruitment_base: float = 5000.0
    recruitment_w: float = -0.4
    gamma: tuple[float, ...] = (-1.5, 1.0, -1.0, 1.0)
    x_sd: float = 2.0
    beta: tuple[float, ...] = (0.8, 0.2, 1.0, -0.05)
    y_sd: float = 1.0
    seed: int = 2017

    def __post_init__(self) -> None:
        for name in ("treatment_logit_slopes", "gamma", "beta"):
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) != 4:
                raise ValueError(f"{name} needs one value per treatment (4)")
            object.__setattr__(self, name, vals)
        nums = (self.w_mean, self.recruitment_base, self.recruitment_w, self.x_sd, self.y_sd,
                *self.treatment_logit_slopes, *self.gamma, *self.beta)
        if not all(math.isfinite(v) for v in nums):
            raise ValueError("simulation parameters must be finite")
        if self.n_studies < 1 or self.w_mean <= 0 or self.x_sd < 0 or self.y_sd < 0:
            raise ValueError("invalid simulation configuration")


def true_means(cfg: DgpConfig) -> dict[str, float]:
    """M^a = E[W] + beta_a (E[X | W] = W)."""
    return {t: cfg.w_mean + b for t, b in zip(TREATMENTS, cfg.beta)}


def true_contrasts(cfg: DgpConfig) -> dict[str, float]:
    m = true_means(cfg)
    return {c: m[c[0]] - m[c[2]] for c in CONTRASTS}


def draw_treatments(rng: np.random.Generator, weights: np.ndarray, k: int = 2) -> list[int]:
    """Sequential weighted draws without replacement (renormalizing after each)."""
    w = np.array(weights, dtype=float)
    chosen = []
    for _ in range(k):
        j = int(rng.choice(len(w), p=w / w.sum()))
        chosen.append(j)
        w[j] = 0.0
    return chosen


def generate_dataset(cfg: DgpConfig, rng: np.random.Generator | None = None) -> Dataset:
    """One simulated network; ``rng`` defaults to a stream derived from ``cfg.seed``."""
    if rng is None:
        rng = replicate_generator(philox_key(cfg.seed, _DATA_TAG), 0)
    slopes = np.array(cfg.treatment_logit_slopes)
    gamma = np.array(cfg.gamma)
    rows = []
    for i in range(cfg.n_studies):
        w = float(rng.poisson(cfg.w_mean))
        arms = draw_treatments(rng, expit(slopes * w))
        mu = cfg.recruitment_base * math.exp(cfg.recruitment_w * w + gamma[arms].sum())
        n = 0
        while n < 2:  # an arm needs two subjects for a standard deviation
            n = int(rng.poisson(mu))
        for a in sorted(arms):
            x = rng.normal(w, cfg.x_sd, size=n)
            y = rng.normal(x + cfg.beta[a], cfg.y_sd)
            rows.append((f"S{i + 1}", {"W": w}, TREATMENTS[a], n,
                         OutcomeSummary.continuous(float(y.mean()), float(y.std(ddof=1)))))
    return Dataset.from_rows(rows, OutcomeKind.CONTINUOUS, TREATMENTS)


def misspecify(spec: OutcomeModelSpec) -> OutcomeModelSpec:
    """Logit-link analogue of an outcome model, scaled by the observed outcome range."""
    return replace(spec, link=Link.LOGIT, bounds="empirical", widen=0.0)


def simulation_pipeline(truncation: float | None = None) -> Pipeline:
    """Unadjusted, G-comp, IPTW and TMLE, plus G-comp and TMLE with the
    misspecified (logit-link) outcome model; logistic propensity on W."""
    correct = OutcomeModelSpec()
    wrong = misspecify(correct)
    return Pipeline(
        [
            EstimatorSpec("unadjusted", Method.UNADJUSTED),
            EstimatorSpec("gcomp", Method.GCOMP, correct),
            EstimatorSpec("iptw", Method.IPTW),
            EstimatorSpec("tmle", Method.TMLE, correct),
            EstimatorSpec("gcomp_mis", Method.GCOMP, wrong),
            EstimatorSpec("tmle_mis", Method.TMLE, wrong),
        ],
        CONTRASTS,
        PropensitySpec(truncation=truncation),
    )


@dataclass(frozen=True)
class ScenarioResult:
    estimator: str
    specification: str
    n_studies: int
    contrast: str
    truth: float
    percent_bias: float
    se_mc: float
    se_bs: float
    coverage: float
    n_replicates: int
    n_failed: int
    mean_discarded: float
    estimates: np.ndarray = field(repr=False, compare=False, default=None)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("estimates")
        return d


def _specification(e: EstimatorSpec) -> str:
    if e.method is Method.UNADJUSTED:
        return "none"
    if e.method is Method.IPTW or e.outcome.link is Link.IDENTITY:
        return "correct"
    return "misspecified"


def run_scenario(cfg: DgpConfig, pipeline: Pipeline | None = None, n_replicates: int = 1000,
                 bootstrap: BootstrapConfig | None = BootstrapConfig(), progress=None) -> list[ScenarioResult]:
    """Monte Carlo evaluation of every estimator key of ``pipeline``.

    Replicate ``r`` draws its dataset from substream ``r`` of the data key
    and bootstraps with a seed derived from ``(cfg.seed, r)``, so datasets
    are shared by all estimators.  ``%bias = 100 (mean - truth) / truth``.
    """
    if n_replicates < 2:
        raise ValueError("need at least 2 replicates")
    pipeline = pipeline or simulation_pipeline()
    truths = true_contrasts(cfg)
    data_key = philox_key(cfg.seed, _DATA_TAG, cfg.n_studies)
    keys = pipeline.keys
    est = {k: np.full(n_replicates, np.nan) for k in keys}
    se = {k: np.full(n_replicates, np.nan) for k in keys}
    cov = {k: np.zeros(n_replicates, dtype=bool) for k in keys}
    disc = {k: np.zeros(n_replicates) for k in keys}
    for r in range(n_replicates):
        d = generate_dataset(cfg, replicate_generator(data_key, r))
        pipe = pipeline.prepare(d)
        point = pipe(d)
        if bootstrap is not None:
            seed = int(philox_key(cfg.seed, _BOOT_TAG, cfg.n_studies, r)[0])
            res = cluster_bootstrap(d, pipe, replace(bootstrap, seed=seed), point)
        for k in keys:
            est[k][r] = point[k]
            if bootstrap is not None and math.isfinite(point[k]):
                iv = res.intervals[k]
                se[k][r] = iv.se
                cov[k][r] = iv.covers(truths[k.split(":")[1]])
                disc[k][r] = iv.n_discarded
        if progress is not None:
            progress(r + 1, n_replicates)
    specs = {e.name: e for e in pipeline.estimators}
    out = []
    for k in keys:
        name, con = k.split(":")
        truth = truths[con]
        ok = np.isfinite(est[k])
        vals = est[k][ok]
        out.append(ScenarioResult(
            estimator=name,
            specification=_specification(specs[name]),
            n_studies=cfg.n_studies,
            contrast=con,
            truth=truth,
            percent_bias=100.0 * (vals.mean() - truth) / truth if vals.size else math.nan,
            se_mc=float(vals.std(ddof=1)) if vals.size > 1 else math.nan,
            se_bs=float(np.nanmean(se[k][ok])) if bootstrap is not None and vals.size else math.nan,
            coverage=float(cov[k][ok].mean()) if bootstrap is not None and vals.size else math.nan,
            n_replicates=n_replicates,
            n_failed=int((~ok).sum()),
            mean_discarded=float(disc[k][ok].mean()) if vals.size else math.nan,
            estimates=est[k],
        ))
    return out


RESULT_COLUMNS = ("estimator", "specification", "n_studies", "contrast", "truth", "percent_bias",
                  "se_mc", "se_bs", "coverage", "n_replicates", "n_failed", "mean_discarded")


def write_results(results: Sequence[ScenarioResult], dest: str | Path, metadata: Mapping | None = None) -> Path:
    """Write results as CSV (one row per estimator x contrast x N) plus a
    ``.json`` metadata sidecar next to it."""
    dest = Path(dest)
    with dest.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in sorted(results, key=lambda r: (r.specification != "correct", r.contrast, r.estimator, r.n_studies)):
            row = r.row()
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
    meta = dict(metadata or {})
    meta.setdefault("rows", len(results))
    meta.setdefault("failed", {f"{r.estimator}:{r.contrast}:N={r.n_studies}": r.n_failed for r in results})
    meta.setdefault("mean_discarded", {f"{r.estimator}:{r.contrast}:N={r.n_studies}": r.mean_discarded
                                       for r in results})
    dest.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")
    return dest
