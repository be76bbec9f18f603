"""Cluster (study-level) bootstrap and coverage bookkeeping.

Random numbers come from numpy's Philox 4x64 counter-based generator.  The
key is derived from the user seed and a purpose tag, and replicate ``b``
uses counter block ``b`` of that key, so every replicate has its own
substream and results do not depend on evaluation order.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .data_model import Dataset

__all__ = [
    "BootstrapConfig",
    "IntervalEstimate",
    "BootstrapResult",
    "InferenceError",
    "philox_key",
    "replicate_generator",
    "resample_indices",
    "resample_weights",
    "cluster_bootstrap",
    "bootstrap_replicates",
    "coverage",
]


class InferenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class BootstrapConfig:
    replicates: int = 1000
    seed: int = 20240101
    ci: str = "percentile"
    level: float = 0.95

    def __post_init__(self) -> None:
        if int(self.replicates) < 2:
            raise ValueError("bootstrap needs at least 2 replicates")
        if self.ci not in ("percentile", "normal"):
            raise ValueError(f"unknown interval type {self.ci!r}")
        if not 0.0 < self.level < 1.0:
            raise ValueError("confidence level must lie in (0, 1)")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class IntervalEstimate:
    point: float
    se: float
    lower: float
    upper: float
    n_effective: int
    n_discarded: int

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper


@dataclass(frozen=True)
class BootstrapResult:
    intervals: dict[str, IntervalEstimate]
    replicates: dict[str, np.ndarray]

    def __getitem__(self, key: str) -> IntervalEstimate:
        return self.intervals[key]


def philox_key(seed: int, *tag: int) -> np.ndarray:
    """128-bit Philox key for ``seed`` and an integer purpose path."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(t) for t in tag))
    return ss.generate_state(2, dtype=np.uint64)


def replicate_generator(key: np.ndarray, index: int) -> np.random.Generator:
    """Generator for substream ``index``: the high counter word is the index."""
    counter = np.array([0, 0, 0, int(index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def resample_indices(key: np.ndarray, index: int, n: int) -> np.ndarray:
    """Study indices of bootstrap replicate ``index`` (n draws with replacement)."""
    return replicate_generator(key, index).integers(0, n, size=n)


def resample_weights(key: np.ndarray, replicates: int, n: int, start: int = 0) -> np.ndarray:
    """(replicates, n) study multiplicities; row b counts study draws of replicate start + b."""
    out = np.empty((replicates, n))
    for b in range(replicates):
        out[b] = np.bincount(resample_indices(key, start + b, n), minlength=n)
    return out


_BOOT_TAG = 0xB007


def bootstrap_replicates(d: Dataset, estimator, cfg: BootstrapConfig, chunk: int = 250) -> dict[str, np.ndarray]:
    """Replicate estimates (NaN where a replicate failed) keyed like the estimator output.

    ``estimator`` maps a Dataset to ``{key: value}``.  If it also offers
    ``evaluate(table, study_weights)`` the replicates are evaluated as
    study-weight rows, which is equivalent to refitting on the resampled
    datasets; otherwise each resample is materialized.
    """
    n = d.n_studies
    if n < 1:
        raise InferenceError("bootstrap needs at least one study")
    key = philox_key(cfg.seed, _BOOT_TAG)
    B = int(cfg.replicates)
    if hasattr(estimator, "evaluate"):
        parts: dict[str, list[np.ndarray]] = {}
        for start in range(0, B, chunk):
            sw = resample_weights(key, min(chunk, B - start), n, start)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                vals = estimator.evaluate(d.table, sw)
            for k, v in vals.items():
                parts.setdefault(k, []).append(np.asarray(v, dtype=float))
        return {k: np.concatenate(v) for k, v in parts.items()}
    rows: list[Mapping[str, float] | None] = []
    for b in range(B):
        sub = d.subset(resample_indices(key, b, n))
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                rows.append(estimator(sub))
        except (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError):
            rows.append(None)
    keys = next((list(r) for r in rows if r is not None), [])
    return {k: np.array([np.nan if r is None else float(r.get(k, np.nan)) for r in rows]) for k in keys}


def _interval(point: float, reps: np.ndarray, cfg: BootstrapConfig) -> IntervalEstimate:
    ok = reps[np.isfinite(reps)]
    n_disc = int(reps.size - ok.size)
    if ok.size == 0:
        raise InferenceError("every bootstrap replicate was discarded")
    se = float(np.std(ok, ddof=1)) if ok.size > 1 else 0.0
    alpha = 1.0 - cfg.level
    if cfg.ci == "percentile":
        lo, hi = (float(v) for v in np.quantile(ok, [alpha / 2, 1 - alpha / 2]))
    else:
        z = float(norm.ppf(1 - alpha / 2))
        lo, hi = point - z * se, point + z * se
    return IntervalEstimate(float(point), se, lo, hi, int(ok.size), n_disc)


def cluster_bootstrap(d: Dataset, estimator, cfg: BootstrapConfig = BootstrapConfig(),
                      point: Mapping[str, float] | None = None) -> BootstrapResult:
    """Resample whole studies with replacement and summarize each estimator key.

    Replicates where a key could not be estimated (absent target treatment,
    failed fit) are discarded for that key and counted in ``n_discarded``.
    Keys whose point estimate is not finite get a NaN interval.
    """
    if point is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            point = estimator(d)
    reps = bootstrap_replicates(d, estimator, cfg)
    intervals = {}
    for k, v in point.items():
        r = reps.get(k, np.full(cfg.replicates, np.nan))
        if not math.isfinite(v):
            intervals[k] = IntervalEstimate(math.nan, math.nan, math.nan, math.nan, 0, int(r.size))
            continue
        intervals[k] = _interval(v, r, cfg)
    return BootstrapResult(intervals, reps)


def coverage(intervals: Sequence[IntervalEstimate], truth: float) -> float:
    """Fraction of intervals with lower <= truth <= upper."""
    if len(intervals) == 0:
        raise ValueError("coverage of an empty collection")
    return sum(iv.lower <= truth <= iv.upper for iv in intervals) / len(intervals)
