"""Two-way fixed-effects estimation with user-clustered standard errors,
plus the design variants built on top of it: experience interactions,
adoption quintiles, placebo subsetting, demographic cross-sections, and
the moving-average measurement-error program.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats as _stats

DEMEAN_TOL = 1e-10
MAX_WINDOW_DAYS = 184  # longest span of two consecutive quarters


@dataclass
class FEFit:
    coefficients: dict[str, float]
    clustered_se: dict[str, float]
    p_values: dict[str, float]
    n_obs: int
    n_clusters: int
    r_squared: float  # within-R^2 on the demeaned model
    fixed_effects_absorbed: tuple[str, str] = ("user", "quarter")

    def as_json(self) -> dict:
        return {
            "coefficients": self.coefficients,
            "clustered_se": self.clustered_se,
            "p_values": self.p_values,
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "r_squared": self.r_squared,
            "fixed_effects_absorbed": list(self.fixed_effects_absorbed),
        }


@dataclass
class CrossSectionFit:
    coefficients: dict[str, float]
    robust_se: dict[str, float]
    p_values: dict[str, float]
    n_obs: int
    r_squared: float


@dataclass
class MovingAveragePoint:
    time: datetime
    value: float
    k: int
    span_days: float


@dataclass
class MovingAverageSeries:
    user_id: str
    points: list[MovingAveragePoint] = field(default_factory=list)


@dataclass
class AttenuationInput:
    k_values: list[int]
    b_hat: list[float]
    se: Optional[list[float]] = None
    sigma_ai_sq: Optional[float] = None   # variance of the k=1 observed regressor
    sigma_eta_sq: Optional[float] = None  # per-function noise variance


def _group_demean(values: np.ndarray, codes: np.ndarray, n_groups: int) -> np.ndarray:
    sums = np.zeros((n_groups, values.shape[1]))
    np.add.at(sums, codes, values)
    counts = np.bincount(codes, minlength=n_groups).astype(float)
    return values - sums[codes] / counts[codes, None]


def within_transform(matrix: np.ndarray, user_codes: np.ndarray, time_codes: np.ndarray,
                     tol: float = DEMEAN_TOL, max_iter: int = 1000) -> np.ndarray:
    """Alternate user/time demeaning until both group means vanish."""
    n_users = int(user_codes.max()) + 1
    n_times = int(time_codes.max()) + 1
    m = matrix.astype(float).copy()
    for _ in range(max_iter):
        m = _group_demean(m, user_codes, n_users)
        m = _group_demean(m, time_codes, n_times)
        user_means = np.zeros((n_users, m.shape[1]))
        np.add.at(user_means, user_codes, m)
        if np.abs(user_means).max() < tol * max(1.0, np.abs(matrix).max()):
            break
    return m


def twoway_fe_ols(panel: pd.DataFrame, y: str, x: Sequence[str],
                  user_col: str = "user_id", time_col: str = "quarter",
                  tol: float = DEMEAN_TOL) -> FEFit:
    """OLS with absorbed user and time fixed effects, CR1 clustered by user.

    Rows with missing y or x are dropped listwise. Rows are canonically
    sorted first so estimates are bit-identical under input permutation.
    """
    x = list(x)
    cols = [y] + x
    df = panel[[user_col, time_col] + cols].dropna(subset=cols)
    if df.empty:
        raise ValueError("no complete observations")
    sort_keys = [df[user_col].to_numpy(), df[time_col].astype(str).to_numpy()]
    sort_keys += [df[c].to_numpy() for c in cols]
    order = np.lexsort(tuple(reversed(sort_keys)))
    df = df.iloc[order]

    user_codes, users = pd.factorize(df[user_col], sort=True)
    time_codes, times = pd.factorize(df[time_col].astype(str), sort=True)
    if len(users) < 2 or len(times) < 2:
        raise ValueError("need at least 2 users and 2 quarters")
    g = len(users)
    if g < 2:
        raise ValueError("single cluster")

    raw = df[cols].to_numpy(dtype=float)
    demeaned = within_transform(raw, user_codes, time_codes, tol=tol)
    yd = demeaned[:, 0]
    xd = demeaned[:, 1:]
    n, k = xd.shape

    scale = np.sqrt((xd**2).mean(axis=0))
    dead = [x[j] for j in range(k) if scale[j] < 1e-12 * max(1.0, np.abs(raw[:, 1 + j]).max())]
    if dead:
        raise ValueError(f"collinear with fixed effects: {', '.join(dead)}")
    xtx = xd.T @ xd
    if np.linalg.matrix_rank(xtx) < k:
        raise ValueError(f"collinear with fixed effects: {', '.join(x)}")

    beta = np.linalg.solve(xtx, xd.T @ yd)
    resid = yd - xd @ beta

    bread = np.linalg.inv(xtx)
    meat = np.zeros((k, k))
    for gi in range(g):
        mask = user_codes == gi
        xg = xd[mask]
        eg = resid[mask]
        score = xg.T @ eg
        meat += np.outer(score, score)
    c = g / (g - 1) * (n - 1) / (n - k)
    vcov = c * bread @ meat @ bread
    se = np.sqrt(np.diag(vcov))

    tss = float(yd @ yd)
    ssr = float(resid @ resid)
    r2 = 1.0 - ssr / tss if tss > 0 else 0.0

    tstats = beta / se
    pvals = 2 * _stats.t.sf(np.abs(tstats), df=g - 1)
    return FEFit(
        coefficients={name: float(b) for name, b in zip(x, beta)},
        clustered_se={name: float(s) for name, s in zip(x, se)},
        p_values={name: float(p) for name, p in zip(x, pvals)},
        n_obs=n, n_clusters=g, r_squared=r2,
    )


# ---------------------------------------------------------------------------
# Designs
# ---------------------------------------------------------------------------

HIGH_EXPERIENCE_YEARS = 6
AI_LAG_COL = "ai_share_lag1"


def quintile_bounds(values: np.ndarray) -> np.ndarray:
    """Inner quintile cut points (20/40/60/80th percentiles)."""
    return np.quantile(values, [0.2, 0.4, 0.6, 0.8])


def quintile_bin(value: float, cuts: np.ndarray) -> int:
    """1-based quintile; values equal to a boundary fall in the lower bin."""
    return 1 + int(np.sum(value > cuts))


def build_design(panel: pd.DataFrame, spec: str) -> tuple[pd.DataFrame, list[str]]:
    """Regressor columns for one of the model variants.

    baseline    -> [ai_share_lag1]
    interaction -> adds the >=6-years-experience dummy and its product
    quintiles   -> indicators for quintiles 2..5 of ai_share_lag1 (bounds
                   from the frame passed in; pass the estimation sample)
    """
    df = panel.copy()
    if AI_LAG_COL not in df.columns:
        raise ValueError(f"panel lacks {AI_LAG_COL}")
    if df[AI_LAG_COL].notna().sum() == 0:
        raise ValueError(f"regressor {AI_LAG_COL} is entirely missing")
    if spec == "baseline":
        return df, [AI_LAG_COL]
    if spec == "interaction":
        df["high_exp"] = (df["experience_years"] >= HIGH_EXPERIENCE_YEARS).astype(float)
        df["ai_x_high_exp"] = df[AI_LAG_COL] * df["high_exp"]
        return df, [AI_LAG_COL, "high_exp", "ai_x_high_exp"]
    if spec == "quintiles":
        vals = df[AI_LAG_COL].dropna().to_numpy()
        cuts = quintile_bounds(vals)
        bins = df[AI_LAG_COL].map(lambda v: quintile_bin(v, cuts) if pd.notna(v) else np.nan)
        names = []
        for q in range(2, 6):
            name = f"ai_q{q}"
            df[name] = (bins == q).astype(float).where(bins.notna())
            names.append(name)
        return df, names
    raise ValueError(f"unknown design spec {spec!r}")


def placebo_filter(panel: pd.DataFrame, cutoff_year: int = 2022,
                   time_col: str = "quarter") -> pd.DataFrame:
    """Rows strictly before Q1 of the cutoff year."""
    cutoff = pd.Period(f"{cutoff_year}Q1", freq="Q")
    quarters = pd.PeriodIndex(panel[time_col], freq="Q")
    out = panel[quarters < cutoff]
    if out.empty:
        warnings.warn(f"placebo filter before {cutoff} leaves no rows")
    return out


def cross_section_ols(rows: pd.DataFrame, y: str, dummies: str,
                      reference: Optional[str] = None) -> CrossSectionFit:
    """OLS of y on level dummies with an intercept; HC1 standard errors.

    The intercept is the reference level's mean (first sorted level unless
    given). Aliased columns are reported by name.
    """
    df = rows[[y, dummies]].dropna()
    levels = sorted(df[dummies].astype(str).unique())
    if len(levels) < 2:
        raise ValueError("need at least 2 dummy levels")
    if reference is None:
        reference = levels[0]
    elif str(reference) not in levels:
        raise ValueError(f"reference level {reference!r} not present")
    keep = [lv for lv in levels if lv != str(reference)]
    yv = df[y].to_numpy(dtype=float)
    lab = df[dummies].astype(str).to_numpy()
    x = np.column_stack([np.ones(len(df))] + [(lab == lv).astype(float) for lv in keep])
    names = ["intercept"] + keep

    r = np.linalg.qr(x, mode="r")
    diag = np.abs(np.diag(r))
    aliased = [names[j] for j in range(len(names)) if diag[j] < 1e-10 * diag.max()]
    if aliased:
        raise ValueError(f"singular design, aliased columns: {', '.join(aliased)}")

    xtx_inv = np.linalg.inv(x.T @ x)
    beta = xtx_inv @ (x.T @ yv)
    resid = yv - x @ beta
    n, k = x.shape
    meat = (x * resid[:, None]).T @ (x * resid[:, None])
    vcov = n / (n - k) * xtx_inv @ meat @ xtx_inv
    se = np.sqrt(np.diag(vcov))
    t = beta / se
    p = 2 * _stats.norm.sf(np.abs(t))
    tss = float(((yv - yv.mean()) ** 2).sum())
    r2 = 1.0 - float(resid @ resid) / tss if tss > 0 else 0.0
    return CrossSectionFit(
        coefficients=dict(zip(names, map(float, beta))),
        robust_se=dict(zip(names, map(float, se))),
        p_values=dict(zip(names, map(float, p))),
        n_obs=n, r_squared=r2,
    )


# ---------------------------------------------------------------------------
# Measurement error: moving averages, interpolation, extrapolation
# ---------------------------------------------------------------------------

def moving_average_ai(user_id: str, scores: Sequence[tuple[datetime, float]],
                      k: int, max_span_days: float = MAX_WINDOW_DAYS) -> MovingAverageSeries:
    """Centered k-function moving average of corrected detection values.

    The window at position t covers floor(k/2) functions back through
    ceil(k/2)-1 forward; windows stretching over more than max_span_days
    are dropped. Fewer than k functions yield an empty series.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pts = sorted(scores, key=lambda p: p[0])
    n = len(pts)
    series = MovingAverageSeries(user_id=user_id)
    if n < k:
        return series
    back = k // 2
    fwd = (k + 1) // 2 - 1
    times = [p[0] for p in pts]
    values = np.array([p[1] for p in pts], dtype=float)
    csum = np.concatenate([[0.0], np.cumsum(values)])
    for t in range(back, n - fwd):
        lo, hi = t - back, t + fwd
        span = (times[hi] - times[lo]).total_seconds() / 86400.0
        if span > max_span_days:
            continue
        series.points.append(MovingAveragePoint(
            time=times[t], value=float((csum[hi + 1] - csum[lo]) / k),
            k=k, span_days=span,
        ))
    return series


def quarter_midpoint(quarter: pd.Period) -> pd.Timestamp:
    start = quarter.start_time.tz_localize("UTC")
    end = (quarter + 1).start_time.tz_localize("UTC")
    return start + (end - start) / 2


def interpolate_to_quarter(series: MovingAverageSeries, quarters: Sequence[pd.Period],
                           max_gap_days: float = MAX_WINDOW_DAYS) -> dict[pd.Period, Optional[float]]:
    """Per-quarter value from the two moving-average points bracketing the
    quarter midpoint; single-sided neighbors pass through; brackets wider
    than max_gap_days leave the quarter missing.
    """
    out: dict[pd.Period, Optional[float]] = {}
    pts = [(pd.Timestamp(p.time), p.value) for p in series.points]
    for q in quarters:
        if not pts:
            out[q] = None
            continue
        mid = quarter_midpoint(q)
        before = None
        after = None
        for t, v in pts:
            if t <= mid:
                before = (t, v)
            if t >= mid and after is None:
                after = (t, v)
        if before is None and after is None:
            out[q] = None
        elif before is None:
            out[q] = after[1]
        elif after is None:
            out[q] = before[1]
        elif before[0] == after[0]:
            out[q] = before[1]
        else:
            gap = (after[0] - before[0]).total_seconds() / 86400.0
            if gap > max_gap_days:
                out[q] = None
            else:
                frac = (mid - before[0]).total_seconds() / (after[0] - before[0]).total_seconds()
                out[q] = before[1] + frac * (after[1] - before[1])
    return out


def attenuation_extrapolate(inp: AttenuationInput) -> tuple[float, dict[int, Optional[float]]]:
    """Extrapolate the per-k estimates to zero measurement error.

    Weighted least squares of b_hat on 1/k (weights 1/se^2 when given);
    the intercept at 1/k -> 0 is the extrapolated effect. When both
    variance components are supplied, the analytic attenuation factor
    per k is returned alongside (1 - (s_eta/k)/((s_ai - s_eta) + s_eta/k)).
    """
    ks = list(inp.k_values)
    if len(set(ks)) < 2:
        raise ValueError("need at least 2 distinct k values")
    if len(ks) != len(inp.b_hat):
        raise ValueError("k_values and b_hat must align")
    x = np.array([1.0 / k for k in ks])
    b = np.array(inp.b_hat, dtype=float)
    if inp.se is not None:
        w = 1.0 / np.array(inp.se, dtype=float) ** 2
    else:
        w = np.ones_like(b)
    design = np.column_stack([np.ones_like(x), x])
    wd = design * w[:, None]
    coef = np.linalg.solve(design.T @ wd, wd.T @ b)
    beta_extrapolated = float(coef[0])

    factors: dict[int, Optional[float]] = {k: None for k in ks}
    if inp.sigma_ai_sq is not None and inp.sigma_eta_sq is not None:
        sigma_true = inp.sigma_ai_sq - inp.sigma_eta_sq
        if sigma_true <= 0:
            raise ValueError("sigma_ai_sq must exceed sigma_eta_sq")
        for k in ks:
            noise_k = inp.sigma_eta_sq / k
            factors[k] = 1.0 - noise_k / (sigma_true + noise_k)
    return beta_extrapolated, factors
