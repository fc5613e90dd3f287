"""User-quarter panel construction.

Joins function-level detection scores with commit metadata into one row
per user and calendar quarter: corrected AI share (forward-filled up to
two quarters and lagged), commit-count outcomes, and library-novelty
outcomes in base, top-5k, and category-coarsened variants. Each user's
first year of data primes the novelty histories and is dropped from the
output sample.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from itertools import combinations
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .correction import CorrectionParams, correct_prevalence

MIN_FUNCTIONS_PER_QUARTER = 10
FORWARD_FILL_QUARTERS = 2
FIRST_YEAR_QUARTERS = 4
BOT_TOTAL_COMMITS = 10_000
BOT_QUARTER_COMMITS = 2_000
TOP_K_LIBRARIES = 5_000

LIBRARY_VARIANTS = ("", "_5k", "_cat")
COUNT_COLUMNS = ["n_all", "n_mult", "n_imp"] + [
    f"{kind}_{what}{variant}"
    for variant in LIBRARY_VARIANTS
    for kind in ("lib", "combo", "pair")
    for what in ("use", "entry")
]


@dataclass
class UserProfile:
    user_id: str
    first_activity: datetime
    total_commits: int
    max_quarter_commits: int
    country: Optional[str] = None
    gender: str = "unknown"
    display_name_inferred: bool = False

    def as_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "first_activity": self.first_activity.astimezone(timezone.utc).isoformat(),
            "total_commits": self.total_commits,
            "max_quarter_commits": self.max_quarter_commits,
            "country": self.country,
            "gender": self.gender,
            "display_name_inferred": self.display_name_inferred,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "UserProfile":
        ts = datetime.fromisoformat(obj["first_activity"].replace("Z", "+00:00"))
        if ts.tzinfo is None:
            ts = ts.replace(tzinfo=timezone.utc)
        return cls(
            user_id=obj["user_id"], first_activity=ts,
            total_commits=obj["total_commits"],
            max_quarter_commits=obj["max_quarter_commits"],
            country=obj.get("country"), gender=obj.get("gender", "unknown"),
            display_name_inferred=obj.get("display_name_inferred", False),
        )


@dataclass
class CommitMeta:
    commit_id: str
    user_id: str
    project_id: str
    timestamp: datetime
    n_files: int
    imports_added: frozenset[str]
    country: Optional[str] = None

    def as_json(self) -> dict:
        return {
            "commit_id": self.commit_id,
            "user_id": self.user_id,
            "project_id": self.project_id,
            "ts": self.timestamp.astimezone(timezone.utc).isoformat(),
            "country": self.country,
            "n_files": self.n_files,
            "imports_added": sorted(self.imports_added),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CommitMeta":
        ts = datetime.fromisoformat(obj["ts"].replace("Z", "+00:00"))
        if ts.tzinfo is None:
            ts = ts.replace(tzinfo=timezone.utc)
        return cls(
            commit_id=obj["commit_id"], user_id=obj["user_id"],
            project_id=obj.get("project_id", ""), timestamp=ts,
            n_files=obj["n_files"], imports_added=frozenset(obj.get("imports_added", [])),
            country=obj.get("country"),
        )


_QUARTER_CACHE: dict[tuple[int, int], pd.Period] = {}


def to_quarter(ts: datetime) -> pd.Period:
    """Calendar quarter of a timestamp, evaluated in UTC."""
    utc = ts.astimezone(timezone.utc)
    key = (utc.year, (utc.month - 1) // 3 + 1)
    period = _QUARTER_CACHE.get(key)
    if period is None:
        period = _QUARTER_CACHE.setdefault(key, pd.Period(freq="Q", year=key[0], quarter=key[1]))
    return period


def filter_bots(profiles: Iterable[UserProfile]) -> set[str]:
    """Users retained after dropping implausible commit volumes."""
    return {
        p.user_id for p in profiles
        if p.total_commits <= BOT_TOTAL_COMMITS
        and p.max_quarter_commits <= BOT_QUARTER_COMMITS
    }


def derive_profiles(commits: Sequence[CommitMeta]) -> dict[str, UserProfile]:
    """Activity-based profiles straight from commit metadata."""
    by_user: dict[str, list[CommitMeta]] = {}
    for c in commits:
        by_user.setdefault(c.user_id, []).append(c)
    out = {}
    for user, rows in sorted(by_user.items()):
        rows = sorted(rows, key=lambda c: (c.timestamp, c.commit_id))
        per_quarter = Counter(to_quarter(c.timestamp) for c in rows)
        countries = [c.country for c in rows if c.country]
        out[user] = UserProfile(
            user_id=user,
            first_activity=rows[0].timestamp,
            total_commits=len(rows),
            max_quarter_commits=max(per_quarter.values()),
            country=max(sorted(set(countries)), key=countries.count) if countries else None,
        )
    return out


def aggregate_ai_share(detect_flags: Sequence[bool], params: CorrectionParams,
                       min_functions: int = MIN_FUNCTIONS_PER_QUARTER) -> Optional[float]:
    """Corrected prevalence for one user-quarter, or None below the floor."""
    if len(detect_flags) < min_functions:
        return None
    d_hat = float(np.mean(np.asarray(detect_flags, dtype=float)))
    return correct_prevalence(d_hat, params)


def forward_fill(values: Sequence[Optional[float]],
                 max_quarters: int = FORWARD_FILL_QUARTERS) -> tuple[list[Optional[float]], list[bool]]:
    """Carry the last observation forward at most max_quarters steps.

    Returns (filled values, per-position filled flags).
    """
    filled: list[Optional[float]] = []
    flags: list[bool] = []
    last_value: Optional[float] = None
    age = 0
    for v in values:
        if v is not None and not (isinstance(v, float) and np.isnan(v)):
            filled.append(v)
            flags.append(False)
            last_value, age = v, 0
        else:
            age += 1
            if last_value is not None and age <= max_quarters:
                filled.append(last_value)
                flags.append(True)
            else:
                filled.append(None)
                flags.append(False)
    return filled, flags


def lag_regressor(panel: pd.DataFrame, variable: str, k: int = 1,
                  user_col: str = "user_id", time_col: str = "quarter") -> pd.Series:
    """Value from quarter q-k aligned to q; missing when q-k is unobserved."""
    if k == 0:
        return panel[variable].copy()
    df = panel[[user_col, time_col, variable]].copy()
    quarters = pd.PeriodIndex(df[time_col], freq="Q")
    key = pd.MultiIndex.from_arrays([df[user_col], quarters])
    lookup = pd.Series(df[variable].to_numpy(), index=key)
    lookup = lookup[~lookup.index.duplicated()]
    wanted = pd.MultiIndex.from_arrays([df[user_col], quarters - k])
    out = lookup.reindex(wanted)
    out.index = panel.index
    out.name = f"{variable}_lag{k}"
    return out


# ---------------------------------------------------------------------------
# Outcomes
# ---------------------------------------------------------------------------

def top_libraries(commits: Sequence[CommitMeta], k: int = TOP_K_LIBRARIES) -> set[str]:
    """The k libraries imported by the most distinct projects (ties by name)."""
    projects_by_lib: dict[str, set[str]] = {}
    for c in commits:
        for lib in c.imports_added:
            projects_by_lib.setdefault(lib, set()).add(c.project_id)
    ranked = sorted(projects_by_lib, key=lambda lib: (-len(projects_by_lib[lib]), lib))
    return set(ranked[:k])


def _variant_sets(commit_sets: Sequence[frozenset[str]], variant: str,
                  top: set[str], catmap: Optional[Mapping[str, int]]) -> list[frozenset]:
    if variant == "":
        sets = list(commit_sets)
    elif variant == "_5k":
        sets = [frozenset(s & top) for s in commit_sets]
    elif variant == "_cat":
        assert catmap is not None
        sets = [frozenset(catmap[lib] for lib in s if lib in catmap) for s in commit_sets]
    else:
        raise ValueError(variant)
    return [s for s in sets if s]


class _NoveltyTracker:
    """Per-user first-use bookkeeping for one variant."""

    def __init__(self):
        self.seen_libs: set = set()
        self.seen_combos: set = set()
        self.seen_pairs: set = set()

    def quarter_counts(self, sets: Sequence[frozenset]) -> dict[str, int]:
        libs = set().union(*sets) if sets else set()
        combos = set(sets)
        pairs = {frozenset(p) for s in sets for p in combinations(sorted(s), 2)}
        counts = {
            "lib_use": len(libs), "lib_entry": len(libs - self.seen_libs),
            "combo_use": len(combos), "combo_entry": len(combos - self.seen_combos),
            "pair_use": len(pairs), "pair_entry": len(pairs - self.seen_pairs),
        }
        self.seen_libs |= libs
        self.seen_combos |= combos
        self.seen_pairs |= pairs
        return counts


def build_panel(functions: Sequence, scores: Mapping[str, Optional[float]],
                commits: Sequence[CommitMeta],
                users: Optional[Mapping[str, UserProfile]] = None,
                params_by_country: Optional[Mapping[str, CorrectionParams]] = None,
                catmap: Optional[Mapping[str, int]] = None,
                threshold: float = 0.5,
                min_functions: int = MIN_FUNCTIONS_PER_QUARTER,
                top_k: int = TOP_K_LIBRARIES,
                drop_first_year: bool = True) -> pd.DataFrame:
    """One row per retained user and calendar quarter.

    `functions` need user_id, function_id, timestamp attributes; `scores`
    maps function_id to p_ai. Country params fall back to the "*" entry.
    Category variants require `catmap`; without it the _cat columns are
    left missing.
    """
    params_by_country = dict(params_by_country or {})
    profiles = derive_profiles(commits)
    if users:
        for uid, prof in users.items():
            profiles[uid] = prof
    retained = filter_bots(profiles.values())

    commits_by_user: dict[str, list[CommitMeta]] = {}
    for c in sorted(commits, key=lambda c: (c.timestamp, c.commit_id)):
        if c.user_id in retained:
            commits_by_user.setdefault(c.user_id, []).append(c)

    flags_by_uq: dict[tuple[str, pd.Period], list[bool]] = {}
    for fn in functions:
        if fn.user_id not in retained:
            continue
        p = scores.get(fn.function_id)
        if p is None:
            continue
        q = to_quarter(fn.timestamp)
        flags_by_uq.setdefault((fn.user_id, q), []).append(p >= threshold)

    needed = {profiles[u].country or "*" for u in commits_by_user}
    missing = sorted(c for c in needed if c not in params_by_country and "*" not in params_by_country)
    if missing and params_by_country:
        raise ValueError(f"missing correction params for countries: {', '.join(missing)}")

    def user_params(user: str) -> Optional[CorrectionParams]:
        country = profiles[user].country
        if country in params_by_country:
            return params_by_country[country]
        return params_by_country.get("*")

    top = top_libraries(commits, k=top_k)
    rows = []
    for user in sorted(commits_by_user):
        ucommits = commits_by_user[user]
        prof = profiles[user]
        q_first = to_quarter(ucommits[0].timestamp)
        q_last = to_quarter(ucommits[-1].timestamp)
        quarters = pd.period_range(q_first, q_last, freq="Q")

        by_q: dict[pd.Period, list[CommitMeta]] = {q: [] for q in quarters}
        for c in ucommits:
            by_q[to_quarter(c.timestamp)].append(c)

        params = user_params(user)
        raw_shares = []
        for q in quarters:
            flags = flags_by_uq.get((user, q), [])
            share = aggregate_ai_share(flags, params, min_functions) if params else None
            raw_shares.append(share)
        shares, fill_flags = forward_fill(raw_shares)

        trackers = {v: _NoveltyTracker() for v in LIBRARY_VARIANTS}
        user_rows = []
        for idx, q in enumerate(quarters):
            qc = by_q[q]
            row = {
                "user_id": user,
                "quarter": q,
                "ai_share": shares[idx],
                "ai_share_filled": fill_flags[idx],
                "ai_share_lag1": shares[idx - 1] if idx >= 1 else None,
                "n_all": len(qc),
                "n_mult": sum(1 for c in qc if c.n_files >= 2),
                "n_imp": sum(1 for c in qc if c.imports_added),
                "experience_years": max(0, q.year - prof.first_activity.year),
                "gender": prof.gender,
                "country": prof.country,
            }
            commit_sets = [frozenset(c.imports_added) for c in qc]
            for variant in LIBRARY_VARIANTS:
                if variant == "_cat" and catmap is None:
                    for kind in ("lib", "combo", "pair"):
                        row[f"{kind}_use{variant}"] = None
                        row[f"{kind}_entry{variant}"] = None
                    continue
                sets = _variant_sets(commit_sets, variant, top, catmap)
                counts = trackers[variant].quarter_counts(sets)
                for key, value in counts.items():
                    row[f"{key}{variant}"] = value
            user_rows.append(row)

        if drop_first_year:
            user_rows = user_rows[FIRST_YEAR_QUARTERS:]
        rows.extend(user_rows)

    df = pd.DataFrame(rows)
    if not df.empty:
        df["quarter"] = pd.PeriodIndex(df["quarter"], freq="Q")
    return df


def write_panel_csv(df: pd.DataFrame, path) -> None:
    out = df.copy()
    if "quarter" in out.columns:
        out["quarter"] = out["quarter"].astype(str)
    out.to_csv(path, index=False)


def read_panel_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path)
    if "quarter" in df.columns:
        df["quarter"] = pd.PeriodIndex(df["quarter"], freq="Q")
    return df
