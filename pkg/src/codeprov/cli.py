"""Command-line entry point.

Subcommands: mine, metrics, score, correct, panel, libnet, regress, value,
simulate, validate. A key=value config file can preset any long option;
explicit flags win. Exit codes: 0 success, 1 usage error, 2 data error.
A one-line JSON diagnostics summary always goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import shlex
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd

from . import codemetrics, correction, econometrics, ingest, libnet, panel as panel_mod
from . import scoring, simulate as simulate_mod, valuation

PROG = "codeprov"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise UsageError(message)


def _read_ndjson(path):
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def _write_ndjson(path, records) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            n += 1
    return n


def _load_params(path) -> dict[str, correction.CorrectionParams]:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    return {
        key: correction.CorrectionParams(tpr=v["tpr"], fpr=v["fpr"], group_key=key)
        for key, v in raw.items()
    }


def _load_config(path) -> dict:
    """key=value lines; blank lines and #-comments ignored."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


# ---------------------------------------------------------------------------
# Subcommand implementations: each returns a diagnostics dict
# ---------------------------------------------------------------------------

def _cmd_mine(args) -> dict:
    diag = ingest.IngestDiagnostics()
    out_path = Path(args.out)
    commits_out = Path(args.commits_out) if args.commits_out else out_path.parent / "commits.ndjson"
    users_out = Path(args.users_out) if args.users_out else out_path.parent / "users.ndjson"

    if args.dump:
        records = ingest.load_commit_dump(args.dump, diag)
    else:
        def _iter_repos():
            for repo in args.repos:
                yield from ingest.mine_repository(repo, diag)
        records = _iter_repos()

    n_functions = 0
    commit_meta = []
    with open(out_path, "w", encoding="utf-8") as fh:
        for rec in records:
            meta = panel_mod.CommitMeta(
                commit_id=rec.commit_id, user_id=rec.user_id, project_id=rec.project_id,
                timestamp=rec.timestamp, n_files=len(rec.files),
                imports_added=frozenset(ingest.commit_added_imports(rec)),
                country=rec.country,
            )
            commit_meta.append(meta)
            for fn in ingest.extract_function_changes(rec, diag):
                fh.write(json.dumps(ingest.function_change_to_json(fn), sort_keys=True) + "\n")
                n_functions += 1
    _write_ndjson(commits_out, (m.as_json() for m in commit_meta))
    profiles = panel_mod.derive_profiles(commit_meta)
    _write_ndjson(users_out, (p.as_json() for _, p in sorted(profiles.items())))
    return {"functions": n_functions, "commits": len(commit_meta),
            "users": len(profiles), **diag.as_dict()}


def _cmd_metrics(args) -> dict:
    rows = [(obj["function_id"], obj["code"]) for obj in _read_ndjson(args.infile)]
    raw = [codemetrics.raw_features(code) for _, code in rows]
    if not raw:
        _write_ndjson(args.out, [])
        return {"functions": 0}
    stats = codemetrics.corpus_feature_stats(raw)

    def records():
        for (fid, code) in rows:
            feats = codemetrics.verbosity_features(code, stats)
            yield {"function_id": fid} | feats.as_dict()

    n = _write_ndjson(args.out, records())
    return {"functions": n}


def _cmd_score(args) -> dict:
    if args.train:
        return _train_baseline_cmd(args)
    if not args.model and not args.exec:
        raise UsageError("score needs --model or --exec (or --train)")
    batch = [(obj["function_id"], obj["code"]) for obj in _read_ndjson(args.infile)]
    if args.model:
        scorer = scoring.BaselineModel.load(args.model)
        records = scoring.score_functions(scorer, batch)
    else:
        scorer = scoring.ExternalScorer(shlex.split(args.exec), timeout=args.timeout)
        try:
            records = scoring.score_functions(scorer, batch)
        finally:
            scorer.close()
    n_missing = sum(1 for r in records if r.p_ai is None)
    _write_ndjson(args.out, (r.as_json() for r in records))
    return {"scored": len(records) - n_missing, "missing": n_missing}


def _train_baseline_cmd(args) -> dict:
    if not args.model_out:
        raise UsageError("--train requires --model-out")
    labeled_rows = list(_read_ndjson(args.train))
    raw = [codemetrics.raw_features(obj["code"]) for obj in labeled_rows]
    stats = codemetrics.corpus_feature_stats(raw)
    labeled = [(codemetrics.verbosity_features(obj["code"], stats), obj["label"])
               for obj in labeled_rows]
    hyper = scoring.TrainConfig(learning_rate=args.lr, epochs=args.epochs,
                                l2=args.l2, seed=args.seed)
    model = scoring.train_baseline(labeled, hyper)
    model.raw_stats = {k: list(v) for k, v in stats.items()}
    model.save(args.model_out)
    return {"trained_on": len(labeled), "model": str(args.model_out)}


def _cmd_correct(args) -> dict:
    params = _load_params(args.params)
    meta = {obj["user_id"]: obj for obj in _read_ndjson(args.meta)} if args.meta else {}
    fn_info = {}
    for obj in _read_ndjson(args.functions):
        fn_info[obj["function_id"]] = (obj["user_id"], obj["ts"])
    group_keys = [k.strip() for k in args.group.split(",") if k.strip()]

    entries = []
    unmatched = 0
    for obj in _read_ndjson(args.scores):
        p = obj.get("p_ai")
        if p is None:
            continue
        info = fn_info.get(obj["function_id"])
        if info is None:
            unmatched += 1
            continue
        user, ts = info
        country = meta.get(user, {}).get("country") or "*"
        quarter = str(panel_mod.to_quarter(datetime.fromisoformat(ts.replace("Z", "+00:00"))))
        values = {"country": country, "quarter": quarter, "user": user}
        try:
            label = ":".join(values[k] for k in group_keys) if group_keys else "all"
        except KeyError as exc:
            raise UsageError(f"unknown group key {exc.args[0]!r}") from exc
        entries.append((label, country, p >= args.threshold))

    params_by_group = {}
    for label, country, _ in entries:
        key = country if country in params else "*"
        if key not in params:
            raise ValueError(f"missing correction params for country {country!r}")
        params_by_group[label] = params[key]
    table = correction.group_prevalence([(lab, f) for lab, _, f in entries],
                                        params_by_group, b=args.bootstrap, seed=args.seed)
    frame = pd.DataFrame([
        {"group": g, "raw_detection_rate": est.raw_detection_rate,
         "corrected": est.corrected, "ci_lo": est.ci_lo, "ci_hi": est.ci_hi,
         "n_functions": est.n_functions}
        for g, est in sorted(table.items())
    ])
    frame.to_csv(args.out, index=False)
    flagged = int(((frame["corrected"] < -0.05) | (frame["corrected"] > 1.05)).sum()) \
        if not frame.empty else 0
    return {"groups": len(frame), "functions": len(entries),
            "unmatched_scores": unmatched, "outside_unit_interval": flagged}


def _cmd_panel(args) -> dict:
    functions = [ingest.function_change_from_json(o) for o in _read_ndjson(args.functions)]
    scores = {o["function_id"]: o.get("p_ai") for o in _read_ndjson(args.scores)}
    commits = [panel_mod.CommitMeta.from_json(o) for o in _read_ndjson(args.commits)]
    users = {o["user_id"]: panel_mod.UserProfile.from_json(o)
             for o in _read_ndjson(args.users)} if args.users else None
    params = _load_params(args.params) if args.params else {}
    catmap = None
    if args.catmap:
        mapping = libnet.load_community_json(args.catmap)
        level = "coarse" if args.cat_level == "coarse" else "fine"
        catmap = {lib: ids[level] for lib, ids in mapping.items()}
    df = panel_mod.build_panel(functions, scores, commits, users=users,
                               params_by_country=params, catmap=catmap,
                               threshold=args.threshold, min_functions=args.min_functions,
                               top_k=args.topk)
    panel_mod.write_panel_csv(df, args.out)
    return {"rows": len(df), "users": int(df["user_id"].nunique()) if not df.empty else 0}


def _cmd_libnet(args) -> dict:
    project_sets: dict[str, set[str]] = {}
    for obj in _read_ndjson(args.functions):
        libs = obj.get("imports_added", [])
        if libs:
            project_sets.setdefault(obj.get("project_id", ""), set()).update(libs)
    counts = libnet.cooccurrence_counts(project_sets)
    graph = libnet.pmi_graph(counts, alpha=args.alpha, threshold=args.pmi_threshold)
    graph = libnet.top_k_filter(graph, k=args.topk)
    fine = libnet.louvain(graph, resolution=args.resolution, seed=args.seed, level="fine")
    coarse = libnet.louvain(graph, resolution=args.resolution, seed=args.seed, level="coarse")
    mapping = libnet.community_json(fine, coarse)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(mapping, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"projects": counts.n_projects, "libraries": len(graph.nodes),
            "edges": len(graph.edges), "skipped_pairs": graph.skipped_pairs,
            "fine_communities": len(set(fine.assignment.values())),
            "coarse_communities": len(set(coarse.assignment.values()))}


_LOG1P_SUFFIX = "_log1p"


def _cmd_regress(args) -> dict:
    df = panel_mod.read_panel_csv(args.panel)
    if args.placebo_before:
        df = econometrics.placebo_filter(df, args.placebo_before)
    y = args.y
    if y.endswith(_LOG1P_SUFFIX):
        base = y[: -len(_LOG1P_SUFFIX)]
        if base not in df.columns:
            raise ValueError(f"panel lacks column {base!r}")
        df[y] = np.log1p(df[base].astype(float))
    elif y not in df.columns:
        raise ValueError(f"panel lacks column {y!r}")
    estimation = df.dropna(subset=[y, econometrics.AI_LAG_COL])
    designed, x_cols = econometrics.build_design(estimation, args.spec)
    fit = econometrics.twoway_fe_ols(designed, y, x_cols)
    payload = fit.as_json() | {"y": y, "spec": args.spec, "cluster": args.cluster}
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"n_obs": fit.n_obs, "n_clusters": fit.n_clusters,
            "coefficients": fit.coefficients}


def _cmd_value(args) -> dict:
    if args.value_cmd == "surplus":
        inputs = valuation.SurplusInputs(delta=args.delta, eta=args.eta,
                                         v1=args.v1, scenario=args.scenario)
        value = (valuation.surplus_elastic(inputs) if args.scenario == "elastic"
                 else valuation.surplus_inelastic(inputs))
        print(json.dumps({"scenario": args.scenario, "surplus_billion_usd": value}))
        return {"surplus_billion_usd": value}
    # wagesum
    tasks_df = pd.read_csv(args.tasks)
    share_cols = [f"share_{i}" for i in range(1, 8)]
    tasks = [
        valuation.TaskRow(
            occupation_id=str(r["occupation_id"]), task_id=str(r["task_id"]),
            frequency_shares=tuple(float(r[c]) for c in share_cols),
            programming_share=float(r["programming_share"]),
        )
        for _, r in tasks_df.iterrows()
    ]
    occupations = {}
    if args.occupations:
        for _, r in pd.read_csv(args.occupations).iterrows():
            occ = str(r["occupation_id"])
            occupations[occ] = valuation.OccupationRow(
                occupation_id=occ, annual_wage=float(r["annual_wage"]),
                employment=float(r["employment"]))
    table = valuation.WageTaskTable(tasks=tasks, occupations=occupations,
                                    weight_scheme=args.scheme, r=args.r)
    microdata = None
    source = "aggregate"
    if args.microdata:
        source = "microdata"
        microdata = [
            valuation.MicrodataRow(weight=float(r["weight"]),
                                   annual_wage=float(r["annual_wage"]),
                                   occupation_id=str(r["occupation_id"]))
            for _, r in pd.read_csv(args.microdata).iterrows()
        ]
    res = valuation.wage_sum(table, source=source, microdata=microdata,
                             renormalize=not args.no_renormalize)
    print(json.dumps({"wage_sum_usd": res.total,
                      "excluded_occupations": res.excluded_occupations}))
    return {"wage_sum_usd": res.total, "excluded": len(res.excluded_occupations)}


def _cmd_simulate(args) -> dict:
    with open(args.scenario, "r", encoding="utf-8") as fh:
        scenario = simulate_mod.SimScenario.from_json(json.load(fh))
    out_dir = Path(args.out_dir)
    written = []
    for r in range(args.replications):
        rep = simulate_mod.replace(scenario, seed=simulate_mod.replication_seed(scenario.seed, r)) \
            if args.replications > 1 else scenario
        paths = simulate_mod.simulate_corpus(rep, out_dir / f"rep_{r:03d}")
        written.append(str(paths.dump))
    return {"replications": args.replications, "dumps": written}


def _cmd_validate(args) -> dict:
    with open(args.scenario, "r", encoding="utf-8") as fh:
        scenario = simulate_mod.SimScenario.from_json(json.load(fh))
    report = simulate_mod.validate_pipeline(scenario, args.replications,
                                            mode=args.mode, workdir=args.workdir)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return {"completed": report["completed"], "failures": len(report["failures"])}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog=PROG, description=__doc__)
    p.add_argument("--config", help="key=value config file; flags override")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("mine", help="extract function changes from repos or a dump")
    src = m.add_mutually_exclusive_group(required=True)
    src.add_argument("--repos", nargs="+", help="local git checkouts")
    src.add_argument("--dump", help="cd1 commit dump file")
    m.add_argument("--out", required=True, help="functions.ndjson")
    m.add_argument("--commits-out", help="commit metadata output (default: <outdir>/commits.ndjson)")
    m.add_argument("--users-out", help="user profile output (default: <outdir>/users.ndjson)")
    m.set_defaults(func=_cmd_mine)

    me = sub.add_parser("metrics", help="verbosity features per function")
    me.add_argument("--in", dest="infile", required=True)
    me.add_argument("--out", required=True)
    me.set_defaults(func=_cmd_metrics)

    s = sub.add_parser("score", help="score functions with a model or external scorer")
    s.add_argument("--in", dest="infile")
    s.add_argument("--out")
    s.add_argument("--model", help="baseline model JSON")
    s.add_argument("--exec", help="external scorer command line")
    s.add_argument("--timeout", type=float, default=30.0)
    s.add_argument("--train", help="labeled NDJSON ({code, label}) to fit the baseline")
    s.add_argument("--model-out", help="where to write the trained model")
    s.add_argument("--lr", type=float, default=0.5)
    s.add_argument("--epochs", type=int, default=500)
    s.add_argument("--l2", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_score)

    c = sub.add_parser("correct", help="misclassification-corrected prevalence by group")
    c.add_argument("--scores", required=True)
    c.add_argument("--functions", required=True, help="functions.ndjson for the user/time join")
    c.add_argument("--meta", help="users.ndjson with countries")
    c.add_argument("--params", required=True, help="JSON: group -> {tpr, fpr}")
    c.add_argument("--group", default="country,quarter")
    c.add_argument("--threshold", type=float, default=0.5)
    c.add_argument("--bootstrap", type=int, default=1000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=_cmd_correct)

    pa = sub.add_parser("panel", help="build the user-quarter panel")
    pa.add_argument("--functions", required=True)
    pa.add_argument("--scores", required=True)
    pa.add_argument("--commits", required=True)
    pa.add_argument("--users")
    pa.add_argument("--params")
    pa.add_argument("--catmap", help="communities.json for _cat variants")
    pa.add_argument("--cat-level", choices=["fine", "coarse"], default="fine")
    pa.add_argument("--threshold", type=float, default=0.5)
    pa.add_argument("--min-functions", type=int, default=panel_mod.MIN_FUNCTIONS_PER_QUARTER)
    pa.add_argument("--topk", type=int, default=panel_mod.TOP_K_LIBRARIES)
    pa.add_argument("--out", required=True)
    pa.set_defaults(func=_cmd_panel)

    ln = sub.add_parser("libnet", help="PMI library network and communities")
    ln.add_argument("--functions", required=True)
    ln.add_argument("--alpha", type=float, default=1.0)
    ln.add_argument("--pmi-threshold", type=float, default=0.0)
    ln.add_argument("--topk", type=int, default=5000)
    ln.add_argument("--resolution", type=float, default=1.0)
    ln.add_argument("--seed", type=int, default=42)
    ln.add_argument("--out", required=True)
    ln.set_defaults(func=_cmd_libnet)

    r = sub.add_parser("regress", help="two-way FE regression on the panel")
    r.add_argument("--panel", required=True)
    r.add_argument("--y", required=True, help="column, or <count>_log1p for log(1+count)")
    r.add_argument("--spec", choices=["baseline", "interaction", "quintiles"],
                   default="baseline")
    r.add_argument("--cluster", default="user")
    r.add_argument("--placebo-before", type=int,
                   help="keep only quarters before Q1 of this year")
    r.add_argument("--out", required=True)
    r.set_defaults(func=_cmd_regress)

    v = sub.add_parser("value", help="economic value calculators")
    vsub = v.add_subparsers(dest="value_cmd", required=True)
    vs = vsub.add_parser("surplus")
    vs.add_argument("--delta", type=float, required=True)
    vs.add_argument("--eta", type=float, required=True)
    vs.add_argument("--v1", type=float, required=True)
    vs.add_argument("--scenario", choices=["elastic", "inelastic"], required=True)
    vs.set_defaults(func=_cmd_value)
    vw = vsub.add_parser("wagesum")
    vw.add_argument("--tasks", required=True,
                    help="CSV: occupation_id,task_id,share_1..share_7,programming_share")
    vw.add_argument("--occupations", help="CSV: occupation_id,annual_wage,employment")
    vw.add_argument("--microdata", help="CSV: weight,annual_wage,occupation_id")
    vw.add_argument("--scheme", choices=["distributive", "relevance"], default="distributive")
    vw.add_argument("--r", type=float, default=valuation.WAGE_TO_COMPENSATION)
    vw.add_argument("--no-renormalize", action="store_true")
    vw.set_defaults(func=_cmd_value)

    si = sub.add_parser("simulate", help="write synthetic corpora with ground truth")
    si.add_argument("--scenario", required=True)
    si.add_argument("--out-dir", required=True)
    si.add_argument("--replications", type=int, default=1)
    si.set_defaults(func=_cmd_simulate)

    va = sub.add_parser("validate", help="end-to-end oracle report on a scenario")
    va.add_argument("--scenario", required=True)
    va.add_argument("--replications", type=int, default=10)
    va.add_argument("--mode", choices=["flags", "files"], default="flags")
    va.add_argument("--workdir")
    va.add_argument("--out")
    va.set_defaults(func=_cmd_validate)
    return p


def _collect_types(parser) -> dict:
    """dest -> converter over the whole subcommand tree."""
    out = {}
    stack = [parser]
    while stack:
        p = stack.pop()
        for action in p._actions:
            if isinstance(action, argparse._SubParsersAction):
                stack.extend(action.choices.values())
            elif action.dest != argparse.SUPPRESS:
                if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                    out[action.dest] = lambda v: v.lower() in ("1", "true", "yes")
                elif action.type is not None:
                    out[action.dest] = action.type
    return out


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if "--config" in argv:
            idx = argv.index("--config")
            config = _load_config(argv[idx + 1])
            converters = _collect_types(parser)
            config = {k: converters.get(k, str)(v) for k, v in config.items()}
            # subparsers parse into fresh namespaces, so defaults must be
            # installed on every parser that owns the dest; config values
            # also satisfy required options (explicit flags still win)
            stack = [parser]
            while stack:
                p = stack.pop()
                owned = {}
                for action in p._actions:
                    if isinstance(action, argparse._SubParsersAction):
                        stack.extend(action.choices.values())
                    elif action.dest in config:
                        owned[action.dest] = config[action.dest]
                        action.required = False
                if owned:
                    p.set_defaults(**owned)
        args = parser.parse_args(argv)
        diagnostics = args.func(args)
        summary = {"command": args.command, "exit": 0, "diagnostics": diagnostics}
        print(json.dumps(summary, sort_keys=True), file=sys.stderr)
        return 0
    except UsageError as exc:
        print(f"{PROG}: usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return 0 if exc.code in (0, None) else 1
    except (ingest.DumpError, scoring.ScorerProtocolError, ValueError, KeyError,
            OSError, json.JSONDecodeError) as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        print(json.dumps({"command": argv[0] if argv else None, "exit": 2,
                          "error": str(exc)}, sort_keys=True), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
