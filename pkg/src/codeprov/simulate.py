"""Synthetic corpora with known ground truth.

The generative model mirrors the estimation targets: latent per-user-
quarter AI shares follow a common adoption path with user-specific onset
delays and quarter noise; commit counts are Poisson with log-mean
base + beta * lagged true share + user effect + quarter effect; each
function is AI with the quarter's latent share and detected through a
(tpr, fpr) confusion channel. A continuous-score mode replaces the
Bernoulli channel with value = share + N(0, sd) for the measurement-error
program. Ground truth lets every downstream estimate be checked for bias,
coverage, and attenuation recovery.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from . import ingest
from .correction import CorrectionParams, bootstrap_prevalence, correct_prevalence
from .econometrics import (
    AttenuationInput,
    attenuation_extrapolate,
    interpolate_to_quarter,
    moving_average_ai,
    placebo_filter,
    twoway_fe_ols,
)
from .panel import CommitMeta, UserProfile, build_panel

UTC = timezone.utc

IMPORT_POOL = ("numpy", "pandas", "scipy", "requests", "flask",
               "torch", "sklearn", "matplotlib")


def default_adoption_path(n_quarters: int = 16, n_zero: int = 8,
                          lo: float = 0.08, hi: float = 0.55) -> tuple[float, ...]:
    ramp = np.linspace(lo, hi, n_quarters - n_zero)
    return tuple([0.0] * n_zero + [float(v) for v in ramp])


@dataclass
class SimScenario:
    n_users: int = 80
    start_quarter: str = "2020Q1"
    n_quarters: int = 16
    adoption_path: tuple[float, ...] = field(default_factory=default_adoption_path)
    tpr: float = 0.9550
    fpr: float = 0.2321
    beta_true: float = 0.12
    commit_intensity_base: float = 25.0
    functions_per_commit: float = 12.0
    seed: int = 0
    user_effect_sd: float = 0.3
    quarter_effect_sd: float = 0.1
    share_noise_sd: float = 0.3
    onset_delay_max: int = 3
    country: str = "US"
    score_noise_sd: Optional[float] = None

    def __post_init__(self):
        self.adoption_path = tuple(self.adoption_path)
        if len(self.adoption_path) != self.n_quarters:
            raise ValueError("adoption_path length must equal n_quarters")
        if not all(0.0 <= r <= 1.0 for r in self.adoption_path):
            raise ValueError("adoption rates must lie in [0, 1]")
        if not (0.0 <= self.fpr < self.tpr <= 1.0):
            raise ValueError("need 0 <= fpr < tpr <= 1")
        if self.commit_intensity_base <= 0 or self.functions_per_commit <= 0:
            raise ValueError("intensities must be positive")

    @property
    def params(self) -> CorrectionParams:
        return CorrectionParams(tpr=self.tpr, fpr=self.fpr, group_key=self.country)

    def to_json(self) -> dict:
        return asdict(self) | {"adoption_path": list(self.adoption_path)}

    @classmethod
    def from_json(cls, obj: dict) -> "SimScenario":
        obj = dict(obj)
        obj["adoption_path"] = tuple(obj["adoption_path"])
        return cls(**obj)


@dataclass
class SimFunction:
    function_id: str
    user_id: str
    timestamp: datetime
    commit_id: str
    path: str
    name: str
    is_ai: bool
    detected: Optional[bool]      # Bernoulli channel
    value: Optional[float] = None  # continuous channel


@dataclass
class SimCommit:
    commit_id: str
    user_id: str
    project_id: str
    timestamp: datetime
    country: str
    imports: tuple[str, ...]
    functions: list[SimFunction]


@dataclass
class QuarterTruth:
    user_id: str
    quarter: str
    true_share: float
    realized_share: Optional[float]
    n_commits: int
    n_functions: int


@dataclass
class SimData:
    scenario: SimScenario
    commits: list[SimCommit]
    quarter_truth: list[QuarterTruth]
    profiles: dict[str, UserProfile]

    def functions(self) -> list[SimFunction]:
        return [f for c in self.commits for f in c.functions]

    def commit_meta(self) -> list[CommitMeta]:
        return [CommitMeta(commit_id=c.commit_id, user_id=c.user_id,
                           project_id=c.project_id, timestamp=c.timestamp,
                           n_files=1, imports_added=frozenset(c.imports),
                           country=c.country)
                for c in self.commits]

    def scores(self) -> dict[str, float]:
        return {f.function_id: (1.0 if f.detected else 0.0) for f in self.functions()}


def simulate_detection_flags(n: int, true_share: float, params: CorrectionParams,
                             rng: np.random.Generator) -> np.ndarray:
    """Detection flags through the confusion channel for n functions."""
    is_ai = rng.random(n) < true_share
    return np.where(is_ai, rng.random(n) < params.tpr, rng.random(n) < params.fpr)


def generate(scenario: SimScenario) -> SimData:
    """Draw one synthetic corpus (no code text yet; see materialize)."""
    rng = np.random.default_rng(scenario.seed)
    quarters = pd.period_range(scenario.start_quarter, periods=scenario.n_quarters, freq="Q")
    path = np.asarray(scenario.adoption_path)
    first_nonzero = int(np.argmax(path > 0)) if (path > 0).any() else scenario.n_quarters

    user_eff = rng.normal(0, scenario.user_effect_sd, scenario.n_users)
    q_eff = rng.normal(0, scenario.quarter_effect_sd, scenario.n_quarters)
    onset = (rng.integers(0, scenario.onset_delay_max + 1, scenario.n_users)
             if scenario.onset_delay_max > 0 else np.zeros(scenario.n_users, dtype=int))

    commits: list[SimCommit] = []
    truth: list[QuarterTruth] = []
    profiles: dict[str, UserProfile] = {}
    for u in range(scenario.n_users):
        user = f"u{u:04d}"
        project = f"proj_{user}"
        lag_true = 0.0
        total = 0
        max_q = 0
        first_ts: Optional[datetime] = None
        for qi, q in enumerate(quarters):
            if qi < first_nonzero + onset[u]:
                true_share = 0.0
            else:
                base = path[min(scenario.n_quarters - 1, qi - onset[u])]
                true_share = float(np.clip(base + rng.normal(0, scenario.share_noise_sd), 0, 1))
            lam = math.exp(math.log(scenario.commit_intensity_base)
                           + scenario.beta_true * lag_true + user_eff[u] + q_eff[qi])
            n_commits = int(rng.poisson(lam))
            q_start = datetime(q.year, (q.quarter - 1) * 3 + 1, 1, tzinfo=UTC)
            days = np.sort(rng.uniform(0.0, 89.0, n_commits))
            # one batch of draws per quarter, sliced out per commit
            n_fns = rng.poisson(scenario.functions_per_commit, size=n_commits).astype(int)
            total_fn = int(n_fns.sum())
            is_ai_q = rng.random(total_fn) < true_share
            if scenario.score_noise_sd is None:
                detected_q = np.where(is_ai_q, rng.random(total_fn) < scenario.tpr,
                                      rng.random(total_fn) < scenario.fpr)
                values_q = None
            else:
                detected_q = None
                values_q = true_share + rng.normal(0, scenario.score_noise_sd, total_fn)
            n_imports = rng.integers(0, 4, size=n_commits)
            pos = 0
            for j in range(n_commits):
                commit_id = f"c-{user}-{qi:02d}-{j:03d}"
                ts = q_start + timedelta(days=float(days[j]))
                imports = tuple(sorted(rng.choice(IMPORT_POOL, size=n_imports[j], replace=False))) \
                    if n_imports[j] else ()
                fpath = f"src_{commit_id}.py"
                fns = []
                for i in range(int(n_fns[j])):
                    name = f"fn_{i}"
                    fns.append(SimFunction(
                        function_id=ingest.function_identity(project, fpath, name),
                        user_id=user, timestamp=ts, commit_id=commit_id,
                        path=fpath, name=name, is_ai=bool(is_ai_q[pos]),
                        detected=(bool(detected_q[pos]) if detected_q is not None else None),
                        value=(float(values_q[pos]) if values_q is not None else None),
                    ))
                    pos += 1
                commits.append(SimCommit(
                    commit_id=commit_id, user_id=user, project_id=project,
                    timestamp=ts, country=scenario.country, imports=imports,
                    functions=fns,
                ))
                if first_ts is None:
                    first_ts = ts
            truth.append(QuarterTruth(
                user_id=user, quarter=str(q), true_share=true_share,
                realized_share=(float(is_ai_q.mean()) if total_fn else None),
                n_commits=n_commits, n_functions=total_fn,
            ))
            total += n_commits
            max_q = max(max_q, n_commits)
            lag_true = true_share
        profiles[user] = UserProfile(
            user_id=user,
            first_activity=first_ts or datetime(quarters[0].year, 1, 1, tzinfo=UTC),
            total_commits=total, max_quarter_commits=max_q,
            country=scenario.country,
        )
    return SimData(scenario=scenario, commits=commits, quarter_truth=truth, profiles=profiles)


_FN_TEMPLATES = (
    "def {name}(x):\n    return x + {i}\n",
    'def {name}(x):\n    """Placeholder variant {i}."""\n    y = x * {i}\n    return y\n',
    "def {name}(x):\n    # branch on sign\n    if x > {i}:\n\n        return x\n    return {i}\n",
    "def {name}(a, b):\n    total = a + b + {i}\n    total = total * 2\n"
    "    total = total - {i}\n    return total\n",
)


def materialize(commit: SimCommit) -> ingest.CommitRecord:
    """Commit record with synthetic placeholder code text.

    Bodies cycle through a few templates so that corpus-level feature
    statistics (blank lines, comments, docstrings) are non-degenerate.
    """
    lines = [f"import {lib}" for lib in commit.imports]
    if lines:
        lines.append("")
    for i, fn in enumerate(commit.functions):
        template = _FN_TEMPLATES[(i + len(commit.commit_id)) % len(_FN_TEMPLATES)]
        lines.extend(template.format(name=fn.name, i=i).splitlines())
        lines.append("")
    new_text = "\n".join(lines) if lines else "# no changes\n"
    added = frozenset(range(1, len(new_text.splitlines()) + 1))
    fc = ingest.FileChange(path=commit.functions[0].path if commit.functions
                           else f"src_{commit.commit_id}.py",
                           is_python=True, old_text=None, new_text=new_text,
                           added_lines=added, deleted_lines=frozenset())
    return ingest.CommitRecord(
        commit_id=commit.commit_id, user_id=commit.user_id,
        project_id=commit.project_id, timestamp=commit.timestamp,
        files=[fc], country=commit.country,
    )


@dataclass
class SimPaths:
    dump: Path
    truth: Path
    scores: Optional[Path]
    users: Path


def simulate_corpus(scenario: SimScenario, out_dir,
                    data: Optional[SimData] = None) -> SimPaths:
    """Write one corpus: cd1 dump, ground truth, flag scores, user profiles."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if data is None:
        data = generate(scenario)

    dump = out / "dump.ndjson"
    ingest.write_commit_dump(dump, (materialize(c) for c in data.commits))

    truth = out / "truth.ndjson"
    with open(truth, "w", encoding="utf-8") as fh:
        meta = {"kind": "meta"} | scenario.to_json()
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for t in data.quarter_truth:
            fh.write(json.dumps({"kind": "uq"} | asdict(t), sort_keys=True) + "\n")
        for fn in data.functions():
            rec = {"kind": "function", "function_id": fn.function_id,
                   "user_id": fn.user_id, "is_ai": fn.is_ai}
            if fn.detected is not None:
                rec["detected"] = fn.detected
            if fn.value is not None:
                rec["value"] = fn.value
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    scores_path: Optional[Path] = None
    if scenario.score_noise_sd is None:
        scores_path = out / "scores.ndjson"
        with open(scores_path, "w", encoding="utf-8") as fh:
            for fn in data.functions():
                fh.write(json.dumps({
                    "function_id": fn.function_id,
                    "p_ai": 1.0 if fn.detected else 0.0,
                    "scorer_id": "sim-flags",
                }, sort_keys=True) + "\n")

    users = out / "users.ndjson"
    with open(users, "w", encoding="utf-8") as fh:
        for _, prof in sorted(data.profiles.items()):
            fh.write(json.dumps(prof.as_json(), sort_keys=True) + "\n")
    return SimPaths(dump=dump, truth=truth, scores=scores_path, users=users)


def replication_seed(master_seed: int, replication: int) -> int:
    return int(np.random.SeedSequence([master_seed, replication]).generate_state(1)[0])


@dataclass
class _Fn:
    function_id: str
    user_id: str
    timestamp: datetime


def _pipeline_once(data: SimData, placebo_cutoff_year: int = 2022,
                   functions=None, commit_meta=None) -> dict:
    """corrected prevalence -> panel -> FE regression on one corpus."""
    scenario = data.scenario
    params = scenario.params
    sim_functions = data.functions()
    flags = np.array([f.detected for f in sim_functions], dtype=bool)
    weights = np.array([t.n_functions for t in data.quarter_truth], dtype=float)
    shares = np.array([t.true_share for t in data.quarter_truth], dtype=float)
    true_mean_share = float((weights * shares).sum() / weights.sum())

    est = bootstrap_prevalence(flags, params, b=500, seed=scenario.seed)
    out = {
        "true_mean_share": true_mean_share,
        "corrected_prevalence": est.corrected,
        "prevalence_bias": est.corrected - true_mean_share,
        "ci_covered": bool(est.ci_lo <= true_mean_share <= est.ci_hi),
    }

    if functions is None:
        functions = [_Fn(f.function_id, f.user_id, f.timestamp) for f in sim_functions]
    if commit_meta is None:
        commit_meta = data.commit_meta()
    scores = data.scores()
    panel = build_panel(functions, scores, commit_meta, users=data.profiles,
                        params_by_country={scenario.country: params})
    panel["y"] = np.log1p(panel["n_all"])
    fit = twoway_fe_ols(panel, "y", ["ai_share_lag1"])
    out["beta_hat"] = fit.coefficients["ai_share_lag1"]
    out["beta_p"] = fit.p_values["ai_share_lag1"]

    pre = placebo_filter(panel, placebo_cutoff_year) if (
        pd.PeriodIndex(panel["quarter"], freq="Q").min()
        < pd.Period(f"{placebo_cutoff_year}Q1", freq="Q")
    ) else pd.DataFrame()
    if not pre.empty and pre["ai_share_lag1"].notna().sum() > 10:
        placebo_fit = twoway_fe_ols(pre, "y", ["ai_share_lag1"])
        out["placebo_p"] = placebo_fit.p_values["ai_share_lag1"]
    else:
        out["placebo_p"] = None
    return out


def _pipeline_via_files(data: SimData, workdir: Path) -> dict:
    """Same pipeline, but the corpus round-trips through the dump format."""
    paths = simulate_corpus(data.scenario, workdir, data=data)
    diag = ingest.IngestDiagnostics()
    functions = []
    commit_meta = []
    for rec in ingest.load_commit_dump(paths.dump, diag):
        commit_meta.append(CommitMeta(
            commit_id=rec.commit_id, user_id=rec.user_id, project_id=rec.project_id,
            timestamp=rec.timestamp, n_files=len(rec.files),
            imports_added=frozenset(ingest.commit_added_imports(rec)),
            country=rec.country,
        ))
        functions.extend(ingest.extract_function_changes(rec, diag))
    return _pipeline_once(data, functions=functions, commit_meta=commit_meta) | {
        "ingest_diagnostics": diag.as_dict(),
    }


def validate_pipeline(scenario: SimScenario, replications: int,
                      mode: str = "flags", workdir=None) -> dict:
    """Bias, coverage, and effect-recovery report over seeded replications.

    mode "flags" runs the statistical pipeline on the in-memory corpus;
    mode "files" additionally round-trips every corpus through the dump
    format and the ingest extractor (slower, same distribution).
    """
    if replications < 1:
        raise ValueError("need at least 1 replication")
    if scenario.score_noise_sd is not None:
        return _validate_attenuation(scenario, replications)
    reps = []
    failures = []
    for r in range(replications):
        rep_scenario = replace(scenario, seed=replication_seed(scenario.seed, r))
        stage = "generate"
        try:
            data = generate(rep_scenario)
            stage = "pipeline"
            if mode == "files":
                if workdir is None:
                    raise ValueError("files mode needs a workdir")
                rep = _pipeline_via_files(data, Path(workdir) / f"rep_{r:03d}")
            else:
                rep = _pipeline_once(data)
            reps.append(rep)
        except Exception as exc:  # reported per stage, run continues
            failures.append({"replication": r, "stage": stage, "error": str(exc)})
    betas = [r["beta_hat"] for r in reps]
    placebo_ps = [r["placebo_p"] for r in reps if r["placebo_p"] is not None]
    report = {
        "replications": replications,
        "completed": len(reps),
        "mode": mode,
        "beta_true": scenario.beta_true,
        "beta_mean": float(np.mean(betas)) if betas else None,
        "beta_sd": float(np.std(betas)) if betas else None,
        "beta_bias": float(np.mean(betas) - scenario.beta_true) if betas else None,
        "prevalence_bias_mean": float(np.mean([r["prevalence_bias"] for r in reps])) if reps else None,
        "ci_coverage": float(np.mean([r["ci_covered"] for r in reps])) if reps else None,
        "placebo_rejection_rate": (float(np.mean([p < 0.05 for p in placebo_ps]))
                                   if placebo_ps else None),
        "failures": failures,
    }
    return report


def _validate_attenuation(scenario: SimScenario, replications: int) -> dict:
    """Attenuation recovery over seeded replications of a continuous-score run."""
    studies = []
    failures = []
    for r in range(replications):
        rep_scenario = replace(scenario, seed=replication_seed(scenario.seed, r))
        try:
            studies.append(attenuation_study(rep_scenario))
        except Exception as exc:
            failures.append({"replication": r, "stage": "attenuation", "error": str(exc)})
    exts = [s["beta_extrapolated"] for s in studies]
    return {
        "replications": replications,
        "completed": len(studies),
        "mode": "attenuation",
        "beta_true": scenario.beta_true,
        "beta_extrapolated_mean": float(np.mean(exts)) if exts else None,
        "recovery_relative_error": (float(abs(np.mean(exts) - scenario.beta_true)
                                          / scenario.beta_true) if exts else None),
        "negative_slope_count": sum(s["slope_in_inverse_k"] < 0 for s in studies),
        "b_increasing_count": sum(s["b_hat"][-1] > s["b_hat"][0] for s in studies),
        "failures": failures,
    }


# ---------------------------------------------------------------------------
# Measurement-error study (continuous-score mode)
# ---------------------------------------------------------------------------

def effect_recovery_scenario(seed: int = 0, beta_true: float = 0.12) -> SimScenario:
    """Scenario tuned for effect recovery and placebo testing.

    A low-noise detector keeps per-quarter share estimates nearly free of
    measurement error, so the FE estimate is dominated by the planted
    effect rather than attenuation; the pre-2022 quarters carry zero true
    adoption for the placebo subset.
    """
    return SimScenario(
        n_users=60, start_quarter="2020Q1", n_quarters=16,
        adoption_path=default_adoption_path(16, 8),
        tpr=0.99, fpr=0.01, beta_true=beta_true,
        commit_intensity_base=40.0, functions_per_commit=4.0,
        share_noise_sd=0.3, onset_delay_max=3, seed=seed,
    )


def attenuation_scenario(seed: int = 0) -> SimScenario:
    """Scenario tuned for the moving-average attenuation study."""
    return SimScenario(
        n_users=60, start_quarter="2022Q1", n_quarters=10,
        adoption_path=tuple(float(v) for v in np.linspace(0.15, 0.5, 10)),
        beta_true=0.5, commit_intensity_base=20.0, functions_per_commit=2.0,
        share_noise_sd=0.2, onset_delay_max=0, user_effect_sd=0.3,
        quarter_effect_sd=0.1, seed=seed, score_noise_sd=0.22,
    )


def attenuation_study(scenario: SimScenario,
                      ks: Sequence[int] = (4, 8, 16, 32),
                      drop_first_year: bool = False) -> dict:
    """Per-k FE estimates on the common sample plus the 1/k extrapolation."""
    if scenario.score_noise_sd is None:
        raise ValueError("attenuation study needs continuous-score mode")
    data = generate(scenario)
    quarters = list(pd.period_range(scenario.start_quarter,
                                    periods=scenario.n_quarters, freq="Q"))
    series_by_user: dict[str, list] = {}
    for fn in data.functions():
        series_by_user.setdefault(fn.user_id, []).append((fn.timestamp, fn.value))

    panel = build_panel([], {}, data.commit_meta(), users=data.profiles,
                        params_by_country={scenario.country: scenario.params},
                        drop_first_year=drop_first_year)
    panel["y"] = np.log1p(panel["n_all"])

    for k in ks:
        per_user = {}
        for user, pts in series_by_user.items():
            ma = moving_average_ai(user, pts, k)
            per_user[user] = interpolate_to_quarter(ma, quarters)
        col = [per_user.get(row.user_id, {}).get(row.quarter) for row in panel.itertuples()]
        panel[f"ai_k{k}"] = [np.nan if v is None else v for v in col]
        panel[f"ai_k{k}_lag1"] = panel.groupby("user_id")[f"ai_k{k}"].shift(1)

    lag_cols = [f"ai_k{k}_lag1" for k in ks]
    common = panel.dropna(subset=lag_cols)
    b_hat, se = [], []
    for k in ks:
        fit = twoway_fe_ols(common, "y", [f"ai_k{k}_lag1"])
        b_hat.append(fit.coefficients[f"ai_k{k}_lag1"])
        se.append(fit.clustered_se[f"ai_k{k}_lag1"])
    extrapolated, factors = attenuation_extrapolate(AttenuationInput(
        k_values=list(ks), b_hat=b_hat, se=se,
        sigma_ai_sq=scenario.share_noise_sd**2 + scenario.score_noise_sd**2,
        sigma_eta_sq=scenario.score_noise_sd**2,
    ))
    slope = float(np.polyfit([1.0 / k for k in ks], b_hat, 1)[0])
    return {
        "k_values": list(ks),
        "b_hat": b_hat,
        "se": se,
        "beta_true": scenario.beta_true,
        "beta_extrapolated": extrapolated,
        "analytic_factors": factors,
        "slope_in_inverse_k": slope,
        "n_common": int(len(common)),
    }
