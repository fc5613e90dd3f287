"""Misclassification-corrected prevalence of AI-generated functions.

A detector with true/false positive rates (tpr, fpr) observes detection
rate d = y*tpr + (1-y)*fpr for true usage rate y; inverting gives
y = (d - fpr)/(tpr - fpr). Corrected values are deliberately not clamped
to [0, 1]; pre-adoption estimates center on zero and may dip below it.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import stats as _stats

MIN_SEPARATION = 1e-6

# Country-specific detector confusion parameters estimated on ground truth.
COUNTRY_PARAMS = {
    "US": {"fpr": 0.2321, "tpr": 0.9550},
    "CN": {"fpr": 0.2405, "tpr": 0.9521},
    "DE": {"fpr": 0.2397, "tpr": 0.9516},
    "IN": {"fpr": 0.2296, "tpr": 0.9520},
    "RU": {"fpr": 0.2572, "tpr": 0.9617},
    "FR": {"fpr": 0.1989, "tpr": 0.9519},
}


@dataclass
class CorrectionParams:
    tpr: float
    fpr: float
    group_key: Optional[str] = None

    def __post_init__(self):
        # identification (tpr > fpr) is checked where the inversion happens,
        # so estimated parameters like (1.0, 1.0) remain representable
        if not (0.0 <= self.fpr <= 1.0 and 0.0 <= self.tpr <= 1.0):
            raise ValueError("rates must lie in [0, 1]")

    def require_identified(self) -> None:
        if self.tpr - self.fpr < MIN_SEPARATION:
            raise ValueError("non-identified confusion parameters: tpr must exceed fpr")


@dataclass
class PrevalenceEstimate:
    raw_detection_rate: float
    corrected: float
    ci_lo: float
    ci_hi: float
    n_functions: int
    group_key: Optional[str] = None


def params_for_country(country: str) -> CorrectionParams:
    entry = COUNTRY_PARAMS[country]
    return CorrectionParams(tpr=entry["tpr"], fpr=entry["fpr"], group_key=country)


def correct_prevalence(d_hat: float, params: CorrectionParams) -> float:
    """(d_hat - fpr) / (tpr - fpr); unclamped by design."""
    params.require_identified()
    return (d_hat - params.fpr) / (params.tpr - params.fpr)


def detection_rate(y: float, params: CorrectionParams) -> float:
    """Forward channel: expected detection rate at true usage y."""
    return y * params.tpr + (1.0 - y) * params.fpr


def bootstrap_prevalence(detect_flags: Sequence[bool], params: CorrectionParams,
                         b: int = 1000, seed: int = 0) -> PrevalenceEstimate:
    """Percentile bootstrap over functions.

    Flags are booleans, so resampling n items with replacement is
    distribution-identical to a Binomial(n, p_hat) draw of the count.
    """
    flags = np.asarray(detect_flags, dtype=bool)
    n = flags.size
    if n == 0:
        raise ValueError("empty detection flags")
    if b < 100:
        raise ValueError("need at least 100 bootstrap resamples")
    d_hat = float(flags.mean())
    corrected = correct_prevalence(d_hat, params)
    rng = np.random.default_rng(seed)
    boot_d = rng.binomial(n, d_hat, size=b) / n
    boot_y = (boot_d - params.fpr) / (params.tpr - params.fpr)
    lo, hi = np.quantile(boot_y, [0.025, 0.975])
    return PrevalenceEstimate(raw_detection_rate=d_hat, corrected=corrected,
                              ci_lo=float(min(lo, corrected)), ci_hi=float(max(hi, corrected)),
                              n_functions=n, group_key=params.group_key)


def group_seed(master_seed: int, group: str) -> int:
    """Deterministic per-group RNG seed split from the master seed."""
    digest = hashlib.sha256(f"{master_seed}\x1f{group}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def group_prevalence(entries: Sequence[tuple[str, bool]],
                     params_by_group: Mapping[str, CorrectionParams],
                     b: int = 1000, seed: int = 0) -> dict[str, PrevalenceEstimate]:
    """Per-group bootstrap estimates; groups with zero functions are omitted.

    Each group is a plain bootstrap_prevalence run on its own flags with an
    RNG stream keyed by (master seed, group), so results are independent of
    other groups' data and of input order.
    """
    groups: dict[str, list[bool]] = {}
    for key, flag in entries:
        groups.setdefault(key, []).append(flag)
    missing = sorted(g for g in groups if g not in params_by_group)
    if missing:
        raise ValueError(f"missing correction params for groups: {', '.join(missing)}")
    out = {}
    for g in sorted(groups):
        params = params_by_group[g]
        est = bootstrap_prevalence(groups[g], params, b=b, seed=group_seed(seed, g))
        est.group_key = g
        out[g] = est
    return out


def welch_ttest(sample_a: Sequence[float], sample_b: Sequence[float]) -> tuple[float, float, float]:
    """Welch statistic, Welch-Satterthwaite df, two-sided p."""
    a = np.asarray(sample_a, dtype=float)
    bb = np.asarray(sample_b, dtype=float)
    if a.size < 2 or bb.size < 2:
        raise ValueError("each sample needs at least 2 values")
    va = a.var(ddof=1)
    vb = bb.var(ddof=1)
    if va == 0.0 and vb == 0.0:
        if a.mean() == bb.mean():
            return 0.0, float(a.size + bb.size - 2), 1.0
        raise ValueError("zero variance in both samples with unequal means")
    if va == 0.0 or vb == 0.0:
        raise ValueError("zero variance sample")
    sa, sb = va / a.size, vb / bb.size
    t = (a.mean() - bb.mean()) / math.sqrt(sa + sb)
    df = (sa + sb) ** 2 / (sa**2 / (a.size - 1) + sb**2 / (bb.size - 1))
    p = 2 * _stats.t.sf(abs(t), df=df)
    return float(t), float(df), float(p)
