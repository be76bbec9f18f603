"""Command-line front end.

Modes:

``analyze``   fit the selected estimators to a dataset, bootstrap them and
              write ``estimates.csv``, ``positivity.txt``, ``assumptions.md``,
              ``forest.dat`` and ``forest.png``;
``simulate``  run the simulation harness and write ``table2_repro.csv``
              (plus a ``.json`` sidecar);
``validate``  check a dataset and list violations.

Settings come from an optional INI file (``--config``) and are overridden by
flags.  Exit codes: 0 success, 1 usage, 2 data, 3 estimation.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import math
import sys
import warnings
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .data_model import DataError, Dataset, OutcomeKind, TargetKind, read_csv, validate_dataset
from .estimators import (
    EstimationError,
    EstimatorSpec,
    Link,
    Method,
    MissingnessSpec,
    OutcomeModelSpec,
    Pipeline,
    WeightConvention,
    resolve_targets,
)
from .inference import BootstrapConfig, InferenceError, cluster_bootstrap
from .propensity import PropensityKind, PropensitySpec, fit_propensity_spec, positivity_report
from .simulation import DgpConfig, run_scenario, simulation_pipeline, write_results

__all__ = [
    "RunConfig",
    "UsageError",
    "MRSA_TREATMENTS",
    "EXAMPLE_CONFIG",
    "load_mrsa",
    "ingest_csv",
    "load_config",
    "run",
    "main",
]

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ESTIMATION = 0, 1, 2, 3

MRSA_TREATMENTS = ("VAN", "TEL", "LIN", "DAP", "TIG", "CEF", "QD")
MRSA_CONTRASTS = ("TEL/VAN", "LIN/VAN", "TEL/LIN")
BUILTIN = {"builtin:mrsa", "mrsa"}
ESTIMATOR_NAMES = tuple(m.value for m in Method)


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str = "analyze"
    input: str | None = None
    out: str = "out"
    estimators: tuple[str, ...] = ("unadjusted", "gcomp", "tmle")
    contrasts: tuple[str, ...] | None = None
    link: str = "auto"
    weights: str | None = None
    bounds: str | None = None
    outcome_covariates: tuple[str, ...] | None = None
    interactions: bool = False
    propensity: str | None = None
    propensity_covariates: tuple[str, ...] | None = None
    truncate_pct: float | None = None
    missingness: str = "auto"
    unadjusted_convention: str = "arm"
    bootstrap_reps: int = 1000
    ci: str = "percentile"
    level: float = 0.95
    seed: int = 20240101
    sim_n_studies: tuple[int, ...] = (15, 50)
    sim_replicates: int = 1000
    sim_bootstrap_reps: int = 500
    sim_seed: int = 2017
    plot: bool = True

    def validate(self) -> None:
        if self.mode not in ("analyze", "simulate", "validate"):
            raise UsageError(f"unknown mode {self.mode!r}")
        if self.mode in ("analyze", "validate") and not self.input:
            raise UsageError(f"{self.mode} mode requires --input")
        bad = [e for e in self.estimators if e not in ESTIMATOR_NAMES]
        if bad:
            raise UsageError(f"unknown estimators {bad}; choose from {list(ESTIMATOR_NAMES)}")
        if min(self.bootstrap_reps, self.sim_replicates, self.sim_bootstrap_reps) < 2:
            raise UsageError("replicate counts must be at least 2")
        if self.missingness not in ("auto", "on", "off"):
            raise UsageError("missingness must be auto, on or off")


EXAMPLE_CONFIG = """\
# nmacausal run configuration.  Every key is optional; command-line flags win.
[run]
# analyze | simulate | validate
mode = analyze
# CSV path, or builtin:mrsa for the shipped antibiotic example
input = builtin:mrsa
out = out
seed = 20240101

[analysis]
# any of: unadjusted, gcomp, iptw, tmle
estimators = unadjusted, gcomp, tmle
# A-B for mean differences, A/B for risk ratios, M[A] for a mean
contrasts = TEL/VAN, LIN/VAN, TEL/LIN
# unadjusted averaging: arm (mean of arm means) or pooled (events over patients)
unadjusted_convention = arm

[outcome]
# identity | logit | auto (logit for binary outcomes)
link = auto
# n_over_s2 | inv_s2 | inv_se (sqrt(N)/S) | n | none
weights = inv_se
# natural | empirical | L,U
bounds = natural
# comma-separated covariate names; omit for all
# covariates = year_c, pneumonia
interactions = false

[propensity]
# logistic | lasso_logistic
kind = lasso_logistic
# truncation percentile in (0, 0.5); omit for none
# truncate_pct = 0.05

[missingness]
# auto (model it when outcomes are missing) | on | off
model = auto

[bootstrap]
replicates = 1000
# percentile | normal
ci = percentile
level = 0.95

[simulate]
n_studies = 15, 50
replicates = 1000
bootstrap_replicates = 500
seed = 2017
"""


# --------------------------------------------------------------------------- data


def load_mrsa() -> Dataset:
    """The shipped MRSA example (27 studies, clinical-cure counts)."""
    text = resources.files("nmacausal").joinpath("data/mrsa.csv").read_text()
    return read_csv(io.StringIO(text), OutcomeKind.BINARY, MRSA_TREATMENTS)


def ingest_csv(path: str) -> Dataset:
    """Read and validate a dataset; violations raise one aggregated DataError."""
    d = load_mrsa() if path in BUILTIN else read_csv(path)
    problems = validate_dataset(d)
    if problems:
        raise DataError("dataset violates the schema:\n" + "\n".join(f"  {v}" for v in problems))
    return d


# --------------------------------------------------------------------------- configuration


def _split(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def load_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if not cp.read(path):
        raise UsageError(f"cannot read config file {path}")
    get = lambda sec, key: cp.get(sec, key, fallback=None)  # noqa: E731
    try:
        for key, sec in (("mode", "run"), ("input", "run"), ("out", "run")):
            if get(sec, key) is not None:
                setattr(cfg, key, get(sec, key))
        if get("run", "seed"):
            cfg.seed = int(get("run", "seed"))
        if get("analysis", "estimators"):
            cfg.estimators = _split(get("analysis", "estimators"))
        if get("analysis", "contrasts"):
            cfg.contrasts = _split(get("analysis", "contrasts"))
        if get("analysis", "unadjusted_convention"):
            cfg.unadjusted_convention = get("analysis", "unadjusted_convention")
        for key in ("link", "weights", "bounds"):
            if get("outcome", key):
                setattr(cfg, key, get("outcome", key))
        if get("outcome", "covariates"):
            cfg.outcome_covariates = _split(get("outcome", "covariates"))
        if cp.has_option("outcome", "interactions"):
            cfg.interactions = cp.getboolean("outcome", "interactions")
        if get("propensity", "kind"):
            cfg.propensity = get("propensity", "kind")
        if get("propensity", "covariates"):
            cfg.propensity_covariates = _split(get("propensity", "covariates"))
        if get("propensity", "truncate_pct"):
            cfg.truncate_pct = float(get("propensity", "truncate_pct"))
        if get("missingness", "model"):
            cfg.missingness = get("missingness", "model")
        if get("bootstrap", "replicates"):
            cfg.bootstrap_reps = int(get("bootstrap", "replicates"))
        if get("bootstrap", "ci"):
            cfg.ci = get("bootstrap", "ci")
        if get("bootstrap", "level"):
            cfg.level = float(get("bootstrap", "level"))
        if get("simulate", "n_studies"):
            cfg.sim_n_studies = tuple(int(v) for v in _split(get("simulate", "n_studies")))
        if get("simulate", "replicates"):
            cfg.sim_replicates = int(get("simulate", "replicates"))
        if get("simulate", "bootstrap_replicates"):
            cfg.sim_bootstrap_reps = int(get("simulate", "bootstrap_replicates"))
        if get("simulate", "seed"):
            cfg.sim_seed = int(get("simulate", "seed"))
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    return cfg


def _bounds(text: str | None):
    if text is None or text in ("natural", "empirical"):
        return text
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--bounds expects natural, empirical or L,U; got {text!r}") from None
    return (lo, hi)


def _pipeline(cfg: RunConfig, d: Dataset) -> tuple[Pipeline, tuple[str, ...]]:
    binary = d.outcome_kind is OutcomeKind.BINARY
    link = cfg.link if cfg.link != "auto" else ("logit" if binary else "identity")
    weights = cfg.weights or ("inv_se" if binary else "n_over_s2")
    try:
        outcome = OutcomeModelSpec(Link(link), cfg.outcome_covariates, cfg.interactions,
                                   WeightConvention(weights), _bounds(cfg.bounds))
        kind = PropensityKind(cfg.propensity or ("lasso_logistic" if binary else "logistic"))
        prop = PropensitySpec(kind, cfg.propensity_covariates, False, cfg.truncate_pct)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    missing = not d.table.observed.all()
    use_mm = cfg.missingness == "on" or (cfg.missingness == "auto" and missing)
    mm = MissingnessSpec(kind, cfg.propensity_covariates) if use_mm else None
    contrasts = cfg.contrasts or (MRSA_CONTRASTS if cfg.input in BUILTIN else None)
    if not contrasts:
        labels = [t.label for t in d.treatments]
        sep = "/" if binary else "-"
        contrasts = tuple(f"{a}{sep}{labels[0]}" for a in labels[1:])
    specs = [EstimatorSpec(e, Method(e), outcome if e in ("gcomp", "tmle") else None,
                           convention=cfg.unadjusted_convention) for e in cfg.estimators]
    try:
        resolve_targets(contrasts, d)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad contrast: {exc}") from None
    return Pipeline(specs, contrasts, prop, mm), contrasts


# --------------------------------------------------------------------------- reports


def _fmt(v: float) -> str:
    return "NA" if not math.isfinite(v) else f"{v:.10g}"


def _assumptions_text(d: Dataset, contrasts: Sequence[str], pos_text: str | None) -> str:
    cov = ", ".join(d.covariate_names) or "(none)"
    trts = ", ".join(t.label for t in d.treatments)
    lines = [
        "# Identification checklist",
        "",
        f"Dataset: {d.n_studies} studies, {d.n_arms} arms, treatments {trts}.",
        f"Adjustment covariates (study level): {cov}.",
        f"Targets: {', '.join(contrasts)}.",
        "",
        "Tick each item once it has been argued for this network.",
        "",
        "- [ ] **No interference.** The outcome of a study does not depend on treatments given in",
        "      other studies, and within a study one arm's treatment does not change another",
        "      arm's summary.  Notes: ______",
        "- [ ] **Unconfoundedness.** Given the covariates listed above, which treatments a trial",
        "      compares is unrelated to its counterfactual arm outcomes.  Study-level traits",
        "      that drive both treatment choice and outcome but are not listed: ______",
        "- [ ] **Consistency.** A treatment label means the same intervention in every study",
        "      (dose, duration, follow-up).  Known variations: ______",
        "- [ ] **Positivity.** Every covariate pattern has a non-zero chance of containing each",
        "      target treatment, and the estimated scores are not close to zero (see",
        "      positivity.txt).  Studies to consider excluding: ______",
        "",
    ]
    if pos_text:
        lines += ["## Estimated generalized propensity scores", "", "```", pos_text.rstrip(), "```", ""]
    return "\n".join(lines)


def _forest_png(rows: list[tuple[str, float, float, float]], path: Path, ratio: bool) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.5, 0.45 * len(rows) + 1.2))
    ys = np.arange(len(rows))[::-1]
    for y, (label, point, lo, hi) in zip(ys, rows):
        if math.isfinite(lo) and math.isfinite(hi):
            ax.plot([lo, hi], [y, y], color="black", lw=1.2)
        if math.isfinite(point):
            ax.plot(point, y, "s", color="black", ms=5)
    ax.axvline(1.0 if ratio else 0.0, color="grey", ls="--", lw=0.8)
    ax.set_yticks(ys, [r[0] for r in rows])
    ax.set_xlabel("risk ratio" if ratio else "mean difference")
    if ratio:
        ax.set_xscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _analyze(cfg: RunConfig, out: Path, created: list[Path]) -> int:
    d = ingest_csv(cfg.input)
    pipe, contrasts = _pipeline(cfg, d)
    targets = resolve_targets(contrasts, d)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pipe = pipe.prepare(d)
        point = pipe(d)
    bad = [k for k, v in point.items() if not math.isfinite(v)]
    if bad:
        raise EstimationError(f"no estimate for {', '.join(bad)}")
    boot = cluster_bootstrap(d, pipe, BootstrapConfig(cfg.bootstrap_reps, cfg.seed, cfg.ci, cfg.level), point)

    def emit(name: str) -> Path:
        p = out / name
        created.append(p)
        return p

    rows = []
    with emit("estimates.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["estimator", "target", "point", "se", "ci_low", "ci_high", "n_discarded"])
        for key in pipe.keys:
            name, target = key.split(":", 1)
            iv = boot.intervals[key]
            w.writerow([name, target, _fmt(iv.point), _fmt(iv.se), _fmt(iv.lower), _fmt(iv.upper), iv.n_discarded])
            rows.append((f"{name} {target}", iv.point, iv.lower, iv.upper))

    pos_text = None
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            spec = pipe.propensity
            if spec.kind is PropensityKind.LASSO and pipe.prop_lambdas is not None:
                spec = replace(spec, lambda_policy=dict(pipe.prop_lambdas))
            ids = sorted({t.a.id for t in targets} | {t.b.id for t in targets if t.b is not None})
            pm = fit_propensity_spec(d, spec, ids)
        pos_text = positivity_report(pm, d).to_text()
        for note in pm.warnings:
            pos_text += f"note: {note}\n"
    except (np.linalg.LinAlgError, ValueError) as exc:
        pos_text = f"Propensity models could not be fitted: {exc}\n"
    emit("positivity.txt").write_text(pos_text)
    emit("assumptions.md").write_text(_assumptions_text(d, contrasts, pos_text))
    with emit("forest.dat").open("w") as fh:
        fh.write("# label point lower upper\n")
        for label, p, lo, hi in rows:
            fh.write(f'"{label}" {_fmt(p)} {_fmt(lo)} {_fmt(hi)}\n')
    if cfg.plot:
        ratio = all(t.kind is TargetKind.RISK_RATIO for t in targets)
        _forest_png(rows, emit("forest.png"), ratio)
    for label, p, lo, hi in rows:
        print(f"{label:<28} {_fmt(p):>12}  [{_fmt(lo)}, {_fmt(hi)}]")
    return EXIT_OK


def _simulate(cfg: RunConfig, out: Path, created: list[Path]) -> int:
    results = []
    boot = BootstrapConfig(cfg.sim_bootstrap_reps, cfg.seed, cfg.ci, cfg.level)
    pipe = simulation_pipeline(cfg.truncate_pct)
    for n in cfg.sim_n_studies:
        dgp = DgpConfig(n_studies=n, seed=cfg.sim_seed)

        def progress(done, total, n=n):
            if done % max(1, total // 10) == 0 or done == total:
                print(f"N={n}: {done}/{total} replicates", file=sys.stderr)

        results += run_scenario(dgp, pipe, cfg.sim_replicates, boot, progress)
    dest = out / "table2_repro.csv"
    created += [dest, dest.with_suffix(".json")]
    write_results(results, dest, {
        "seed": cfg.sim_seed, "bootstrap_seed": cfg.seed, "replicates": cfg.sim_replicates,
        "bootstrap_replicates": cfg.sim_bootstrap_reps, "n_studies": list(cfg.sim_n_studies),
        "truncation": cfg.truncate_pct,
    })
    for r in results:
        print(f"N={r.n_studies:<3} {r.estimator:<11} {r.contrast}  bias {r.percent_bias:7.1f}%  "
              f"SE-MC {r.se_mc:.3f}  SE-BS {r.se_bs:.3f}  cov {100 * r.coverage:5.1f}%")
    return EXIT_OK


def _validate(cfg: RunConfig) -> int:
    d = ingest_csv(cfg.input)
    missing = int((~d.table.observed).sum())
    print(f"ok: {d.n_studies} studies, {d.n_arms} arms, {len(d.treatments)} treatments, "
          f"{missing} arms with a missing outcome, outcome {d.outcome_kind.value}")
    return EXIT_OK


def run(cfg: RunConfig) -> int:
    """Execute one run; on failure every file written by it is removed."""
    cfg.validate()
    if cfg.mode == "validate":
        return _validate(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    created: list[Path] = []
    try:
        return _analyze(cfg, out, created) if cfg.mode == "analyze" else _simulate(cfg, out, created)
    except BaseException:
        for p in created:
            p.unlink(missing_ok=True)
        raise


# --------------------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nmacausal", description="Causal estimators for arm-level network meta-analysis.")
    p.add_argument("--config", help="INI configuration file (see --print-config)")
    p.add_argument("--print-config", action="store_true", help="print a commented example configuration")
    p.add_argument("--mode", choices=("analyze", "simulate", "validate"))
    p.add_argument("--input", help="dataset CSV, or builtin:mrsa")
    p.add_argument("--out", help="output directory")
    p.add_argument("--estimators", help=f"comma-separated subset of {','.join(ESTIMATOR_NAMES)}")
    p.add_argument("--contrasts", help="comma-separated targets such as TEL/VAN or 2-1")
    p.add_argument("--bootstrap-reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--truncate-pct", type=float, help="propensity truncation percentile, e.g. 0.05")
    p.add_argument("--weights", choices=[w.value for w in WeightConvention])
    p.add_argument("--bounds", help="natural, empirical or L,U")
    p.add_argument("--link", choices=("auto", "identity", "logit"))
    p.add_argument("--propensity", choices=[k.value for k in PropensityKind])
    p.add_argument("--missingness", choices=("auto", "on", "off"))
    p.add_argument("--sim-replicates", type=int)
    p.add_argument("--sim-n-studies", help="comma-separated study counts, e.g. 15,50")
    p.add_argument("--sim-bootstrap-reps", type=int, help="bootstrap replicates per simulated dataset")
    p.add_argument("--no-plot", action="store_true", help="skip forest.png")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.print_config:
        print(EXAMPLE_CONFIG, end="")
        return EXIT_OK
    try:
        cfg = load_config(args.config)
        for key in ("mode", "input", "out", "bootstrap_reps", "seed", "truncate_pct", "weights",
                    "bounds", "link", "propensity", "missingness", "sim_replicates", "sim_bootstrap_reps"):
            v = getattr(args, key)
            if v is not None:
                setattr(cfg, key, v)
        if args.estimators:
            cfg.estimators = _split(args.estimators)
        if args.contrasts:
            cfg.contrasts = _split(args.contrasts)
        if args.sim_n_studies:
            cfg.sim_n_studies = tuple(int(v) for v in _split(args.sim_n_studies))
        if args.no_plot:
            cfg.plot = False
        return run(cfg)
    except UsageError as exc:
        print(f"nmacausal: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"nmacausal: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EstimationError, InferenceError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"nmacausal: estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
