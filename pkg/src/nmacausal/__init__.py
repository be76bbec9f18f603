"""Causal estimators for network meta-analysis of aggregate trial data.

Studies report per-arm summaries (size, mean, standard deviation or event
count).  Study-level covariates may drive both which treatments a study
compares and the outcome level; the estimators here (G-computation, IPTW,
TMLE) adjust for that and target population-average treatment means.
"""

from __future__ import annotations

from .data_model import (
    ArmTable,
    DataError,
    Dataset,
    OutcomeKind,
    OutcomeSummary,
    TargetKind,
    TargetParameter,
    read_csv,
    validate_dataset,
    write_csv,
)
from .estimators import (
    EstimateReport,
    EstimatorSpec,
    Link,
    Method,
    MissingnessSpec,
    OutcomeModelSpec,
    Pipeline,
    WeightConvention,
    contrast,
    estimate_gcomp,
    estimate_iptw,
    estimate_tmle,
    estimate_unadjusted,
)
from .inference import BootstrapConfig, cluster_bootstrap
from .propensity import PropensityKind, PropensitySpec, fit_propensity_spec
from .simulation import DgpConfig, generate_dataset, run_scenario

__version__ = "0.1.0"

__all__ = [
    "ArmTable",
    "DataError",
    "Dataset",
    "OutcomeKind",
    "OutcomeSummary",
    "TargetKind",
    "TargetParameter",
    "read_csv",
    "validate_dataset",
    "write_csv",
    "EstimateReport",
    "EstimatorSpec",
    "Link",
    "Method",
    "MissingnessSpec",
    "OutcomeModelSpec",
    "Pipeline",
    "WeightConvention",
    "contrast",
    "estimate_gcomp",
    "estimate_iptw",
    "estimate_tmle",
    "estimate_unadjusted",
    "BootstrapConfig",
    "cluster_bootstrap",
    "PropensityKind",
    "PropensitySpec",
    "fit_propensity_spec",
    "DgpConfig",
    "generate_dataset",
    "run_scenario",
]
