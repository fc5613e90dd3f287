"""Verbosity and templatedness features of function text, plus the
false-positive association analyses (rank correlations and decile plots).
"""

from __future__ import annotations

import ast
import io
import math
import tokenize as _tokenize
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats as _stats

RAW_FEATURES = ("avg_line_length", "blank_ratio", "comment_ratio",
                "docstring_length", "token_count")

# feature names in model/serialization order
FEATURE_FIELDS = RAW_FEATURES + ("composite_verbosity", "composite_verbosity_size",
                                 "templatedness")

_DISCARD_TOKENS = {
    _tokenize.NEWLINE, _tokenize.NL, _tokenize.INDENT, _tokenize.DEDENT,
    _tokenize.ENCODING, _tokenize.ENDMARKER,
}


@dataclass
class VerbosityFeatures:
    avg_line_length: float
    blank_ratio: float
    comment_ratio: float
    docstring_length: float
    token_count: int
    composite_verbosity: float
    composite_verbosity_size: float
    templatedness: float

    def as_vector(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in FEATURE_FIELDS], dtype=float)

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in FEATURE_FIELDS}


def tokenize(source: str) -> list[str]:
    """Lexical tokens of Python source via the stdlib lexer.

    Whitespace, newlines and indentation are not tokens; a comment is a
    single token. Lexing stops quietly at the first unlexable position.
    """
    tokens: list[str] = []
    try:
        for tok in _tokenize.generate_tokens(io.StringIO(source).readline):
            if tok.type in _DISCARD_TOKENS or tok.string == "":
                continue
            tokens.append(tok.string)
    except (_tokenize.TokenError, IndentationError, SyntaxError, ValueError):
        pass
    return tokens


def templatedness(tokens: Sequence[str]) -> float:
    """One minus normalized token entropy: 1 − H(tokens)/log(V).

    H is the empirical Shannon entropy of token frequencies (natural log)
    and V the number of distinct tokens. V ≤ 1 gives 1.0 by convention.
    """
    counts = Counter(tokens)
    v = len(counts)
    if v <= 1:
        return 1.0
    n = len(tokens)
    h = -sum((c / n) * math.log(c / n) for c in counts.values())
    return 1.0 - h / math.log(v)


def _docstring_length(source: str) -> int:
    try:
        tree = ast.parse(source)
    except (SyntaxError, ValueError):
        return 0
    node: ast.AST = tree
    if len(tree.body) == 1 and isinstance(tree.body[0], (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
        node = tree.body[0]
    doc = ast.get_docstring(node, clean=False)
    return len(doc) if doc is not None else 0


def raw_features(source: str) -> dict[str, float]:
    """The five raw verbosity features of one source text."""
    lines = source.splitlines()
    n_lines = max(len(lines), 1)
    blank = sum(1 for ln in lines if not ln.strip())
    comment = sum(1 for ln in lines if ln.lstrip().startswith("#"))
    tokens = tokenize(source)
    return {
        "avg_line_length": sum(len(ln) for ln in lines) / n_lines,
        "blank_ratio": blank / n_lines,
        "comment_ratio": comment / n_lines,
        "docstring_length": float(_docstring_length(source)),
        "token_count": float(len(tokens)),
    }


def corpus_feature_stats(rows: Sequence[dict[str, float]]) -> dict[str, tuple[float, float]]:
    """Per-feature (mean, stddev) over a corpus of raw-feature dicts."""
    out = {}
    for name in RAW_FEATURES:
        vals = np.array([r[name] for r in rows], dtype=float)
        out[name] = (float(vals.mean()), float(vals.std()))
    return out


def verbosity_features(source: str,
                       corpus_stats: dict[str, tuple[float, float]]) -> VerbosityFeatures:
    """All eight features; composites are z-score averages under corpus_stats."""
    raw = raw_features(source)

    def z(name):
        mean, sd = corpus_stats[name]
        if sd <= 0:
            raise ValueError(f"zero stddev for feature {name!r}")
        return (raw[name] - mean) / sd

    style = [z("avg_line_length"), z("blank_ratio"), z("comment_ratio"), z("docstring_length")]
    return VerbosityFeatures(
        avg_line_length=raw["avg_line_length"],
        blank_ratio=raw["blank_ratio"],
        comment_ratio=raw["comment_ratio"],
        docstring_length=raw["docstring_length"],
        token_count=int(raw["token_count"]),
        composite_verbosity=float(np.mean(style)),
        composite_verbosity_size=float(np.mean(style + [z("token_count")])),
        templatedness=templatedness(tokenize(source)),
    )


def spearman(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Rank correlation with average ranks for ties; Student-t test.

    Returns (rho, t, two-sided p) with t = rho·sqrt((n−2)/(1−rho²)).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 3:
        raise ValueError("need two equal-length samples with n >= 3")
    rx = _stats.rankdata(x, method="average")
    ry = _stats.rankdata(y, method="average")
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        raise ValueError("zero rank variance")
    rho = float(np.corrcoef(rx, ry)[0, 1])
    rho = max(-1.0, min(1.0, rho))
    if abs(rho) > 1.0 - 1e-12:
        rho = math.copysign(1.0, rho)
    n = x.size
    if abs(rho) >= 1.0:
        rho = math.copysign(1.0, rho)
        return rho, math.copysign(math.inf, rho), 0.0
    t = rho * math.sqrt((n - 2) / (1 - rho * rho))
    p = 2 * _stats.t.sf(abs(t), df=n - 2)
    return rho, t, float(p)


def decile_fp_analysis(features: Sequence[float], fp_flags: Sequence[bool],
                       bootstrap_b: int = 1000, seed: int = 0,
                       n_bins: int = 10) -> list[tuple[float, float, float]]:
    """Mean false-positive rate per feature decile with bootstrap CIs.

    Bins are equal-count over the feature sort order (stable, so ties keep
    input order); CIs are percentile bootstrap with `bootstrap_b` resamples.
    """
    x = np.asarray(features, dtype=float)
    flags = np.asarray(fp_flags, dtype=float)
    if x.shape != flags.shape:
        raise ValueError("features and fp_flags must align")
    if x.size < n_bins:
        raise ValueError(f"need at least {n_bins} observations, got {x.size}")
    order = np.argsort(x, kind="stable")
    bins = np.array_split(order, n_bins)
    rng = np.random.default_rng(seed)
    out = []
    for idx in bins:
        vals = flags[idx]
        mean = float(vals.mean())
        boots = rng.choice(vals, size=(bootstrap_b, vals.size), replace=True).mean(axis=1)
        lo, hi = np.quantile(boots, [0.025, 0.975])
        out.append((mean, float(lo), float(hi)))
    return out
