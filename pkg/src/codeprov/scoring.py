"""Per-function AI-provenance scoring.

Two scorer kinds share one interface: a built-in logistic baseline over the
verbosity features, and external scorer processes speaking a line-delimited
JSON protocol (request {"id", "code"} -> response {"id", "p_ai"}, preceded
by a {"ready": true, "scorer_id": ...} handshake).
"""

from __future__ import annotations

import json
import queue
import subprocess
import threading
from dataclasses import dataclass, field
from datetime import datetime
from typing import Optional, Sequence

import numpy as np

from .codemetrics import FEATURE_FIELDS, VerbosityFeatures, verbosity_features

DEFAULT_THRESHOLD = 0.5


class ScorerProtocolError(Exception):
    """External scorer broke the wire protocol."""


@dataclass
class ScoreRecord:
    function_id: str
    p_ai: Optional[float]  # None marks a per-item scorer failure
    scorer_id: str
    scored_at: Optional[datetime] = None

    def as_json(self) -> dict:
        obj = {"function_id": self.function_id, "p_ai": self.p_ai,
               "scorer_id": self.scorer_id}
        if self.scored_at is not None:
            obj["scored_at"] = self.scored_at.isoformat()
        return obj


@dataclass
class EvalMetrics:
    roc_auc: float
    tpr_at_threshold: float
    fpr_at_threshold: float
    f1_at_threshold: float
    threshold: float
    mean_p_positive: float = float("nan")  # mean p_ai over true positives, reported only


@dataclass
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 500
    l2: float = 0.0
    seed: int = 0


@dataclass
class BaselineModel:
    """Logistic regression over the 8 verbosity features (plus intercept)."""

    weights: np.ndarray                       # len 9, intercept last
    feature_means: np.ndarray                 # len 8
    feature_stds: np.ndarray                  # len 8
    training_seed: int = 0
    raw_stats: Optional[dict] = None          # corpus stats for building composites from code
    scorer_id: str = "baseline"

    def predict_proba(self, features: Sequence[VerbosityFeatures]) -> np.ndarray:
        x = np.array([f.as_vector() for f in features], dtype=float)
        z = (x - self.feature_means) / self.feature_stds
        logits = z @ self.weights[:-1] + self.weights[-1]
        return 1.0 / (1.0 + np.exp(-logits))

    def score_code(self, code: str) -> float:
        if self.raw_stats is None:
            raise ValueError("model lacks corpus raw_stats; cannot score raw code")
        stats = {k: tuple(v) for k, v in self.raw_stats.items()}
        feats = verbosity_features(code, stats)
        return float(self.predict_proba([feats])[0])

    def save(self, path) -> None:
        obj = {
            "weights": self.weights.tolist(),
            "feature_fields": list(FEATURE_FIELDS),
            "feature_means": self.feature_means.tolist(),
            "feature_stds": self.feature_stds.tolist(),
            "training_seed": self.training_seed,
            "raw_stats": self.raw_stats,
            "scorer_id": self.scorer_id,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "BaselineModel":
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        return cls(
            weights=np.array(obj["weights"], dtype=float),
            feature_means=np.array(obj["feature_means"], dtype=float),
            feature_stds=np.array(obj["feature_stds"], dtype=float),
            training_seed=obj.get("training_seed", 0),
            raw_stats=obj.get("raw_stats"),
            scorer_id=obj.get("scorer_id", "baseline"),
        )


def _cross_entropy(w, x, y, l2):
    logits = x @ w
    # stable log(1+exp(·))
    ce = np.logaddexp(0.0, logits) - y * logits
    return float(ce.mean() + l2 * (w[:-1] @ w[:-1]))


def _gradient(w, x, y, l2):
    p = 1.0 / (1.0 + np.exp(-(x @ w)))
    g = x.T @ (p - y) / len(y)
    g[:-1] += 2.0 * l2 * w[:-1]
    return g


def loss_and_gradient(w: np.ndarray, x: np.ndarray, y: np.ndarray,
                      l2: float = 0.0) -> tuple[float, np.ndarray]:
    """Mean L2-regularized cross-entropy and its gradient (intercept unpenalized).

    x carries a trailing all-ones column for the intercept.
    """
    return _cross_entropy(w, x, y, l2), _gradient(w, x, y, l2)


def train_baseline(labeled: Sequence[tuple[VerbosityFeatures, str]],
                   hyper: TrainConfig = TrainConfig()) -> BaselineModel:
    """Full-batch gradient descent on standardized features.

    Labels are "ai" (positive) or "human". The step is halved whenever a
    full step would raise the loss, so training loss is non-increasing.
    """
    if not labeled:
        raise ValueError("empty training set")
    labels = np.array([1.0 if lab == "ai" else 0.0 for _, lab in labeled])
    if labels.min() == labels.max():
        raise ValueError("degenerate labels: need both classes")
    x_raw = np.array([f.as_vector() for f, _ in labeled], dtype=float)
    if not np.isfinite(x_raw).all():
        raise ValueError("non-finite feature values")
    means = x_raw.mean(axis=0)
    stds = x_raw.std(axis=0)
    stds[stds == 0] = 1.0  # constant feature carries no signal; weight stays at 0
    z = (x_raw - means) / stds
    x = np.hstack([z, np.ones((len(z), 1))])

    w = np.zeros(x.shape[1])
    loss = _cross_entropy(w, x, labels, hyper.l2)
    lr = hyper.learning_rate
    for _ in range(hyper.epochs):
        g = _gradient(w, x, labels, hyper.l2)
        step = lr
        for _ in range(60):
            cand = w - step * g
            cand_loss = _cross_entropy(cand, x, labels, hyper.l2)
            if cand_loss <= loss + 1e-12:
                break
            step /= 2.0
        else:
            break  # no improving step representable; converged
        w, loss = cand, cand_loss
    return BaselineModel(weights=w, feature_means=means, feature_stds=stds,
                         training_seed=hyper.seed)


# ---------------------------------------------------------------------------
# External scorer processes
# ---------------------------------------------------------------------------

class ExternalScorer:
    """Handle on one scorer subprocess speaking the wire protocol."""

    def __init__(self, argv: Sequence[str], timeout: float = 30.0):
        self.proc = subprocess.Popen(
            list(argv), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            text=True, bufsize=1,
        )
        self.timeout = timeout
        self._lines: queue.Queue[Optional[str]] = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()
        ready = self._read_json()
        if not (isinstance(ready, dict) and ready.get("ready") is True):
            raise ScorerProtocolError(f"expected ready handshake, got: {ready!r}")
        self.scorer_id = str(ready.get("scorer_id", "external"))

    def _pump(self):
        for line in self.proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _read_json(self, timeout: Optional[float] = None):
        try:
            line = self._lines.get(timeout=timeout if timeout is not None else self.timeout)
        except queue.Empty:
            return TimeoutError
        if line is None:
            raise ScorerProtocolError("scorer closed its output")
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            raise ScorerProtocolError(f"unparseable scorer line: {line!r}") from exc

    def send(self, request: dict) -> None:
        self.proc.stdin.write(json.dumps(request) + "\n")
        self.proc.stdin.flush()

    def close(self) -> None:
        try:
            self.proc.stdin.close()
            self.proc.wait(timeout=5)
        except Exception:
            self.proc.kill()


def _score_external(scorer: ExternalScorer,
                    batch: Sequence[tuple[str, str]]) -> list[ScoreRecord]:
    pending = {f"q{i}": (i, fid) for i, (fid, _) in enumerate(batch)}
    results: dict[str, Optional[float]] = {}
    for i, (fid, code) in enumerate(batch):
        scorer.send({"id": f"q{i}", "code": code})

    def collect(deadline_ids: set[str]):
        while deadline_ids:
            msg = scorer._read_json()
            if msg is TimeoutError:
                return
            if not isinstance(msg, dict) or "id" not in msg:
                raise ScorerProtocolError(f"response without id: {msg!r}")
            rid = msg["id"]
            if rid not in pending or rid in results:
                raise ScorerProtocolError(f"unexpected response id: {rid!r}")
            results[rid] = msg.get("p_ai")
            deadline_ids.discard(rid)

    outstanding = set(pending)
    collect(outstanding)
    if outstanding:
        # one retry round for items that timed out
        for rid in sorted(outstanding, key=lambda r: pending[r][0]):
            _, fid = pending[rid]
            code = batch[pending[rid][0]][1]
            scorer.send({"id": rid, "code": code})
        collect(outstanding)
    out = []
    for i, (fid, _) in enumerate(batch):
        p = results.get(f"q{i}")
        out.append(ScoreRecord(function_id=fid, p_ai=p, scorer_id=scorer.scorer_id))
    return out


def score_functions(scorer: BaselineModel | ExternalScorer,
                    batch: Sequence[tuple[str, str]]) -> list[ScoreRecord]:
    """One ScoreRecord per (function_id, code), input order preserved."""
    if isinstance(scorer, BaselineModel):
        return [ScoreRecord(function_id=fid, p_ai=scorer.score_code(code),
                            scorer_id=scorer.scorer_id)
                for fid, code in batch]
    return _score_external(scorer, batch)


# ---------------------------------------------------------------------------
# Evaluation against labels
# ---------------------------------------------------------------------------

def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-statistic AUC; tied scores get average ranks."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative label")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s), dtype=float)
    sorted_scores = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    r_pos = ranks[y == 1].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def evaluate(scores: Sequence[ScoreRecord | float], labels: Sequence[int],
             threshold: float = DEFAULT_THRESHOLD) -> EvalMetrics:
    """AUC plus tpr/fpr/F1 at the threshold; detection means p_ai >= threshold."""
    p = np.array([s.p_ai if isinstance(s, ScoreRecord) else s for s in scores], dtype=float)
    y = np.asarray(labels, dtype=int)
    auc = roc_auc(p, y)
    detect = p >= threshold
    tp = int(np.sum(detect & (y == 1)))
    fp = int(np.sum(detect & (y == 0)))
    fn = int(np.sum(~detect & (y == 1)))
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    tpr = tp / n_pos
    fpr = fp / n_neg
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0
    return EvalMetrics(roc_auc=auc, tpr_at_threshold=tpr, fpr_at_threshold=fpr,
                       f1_at_threshold=f1, threshold=threshold,
                       mean_p_positive=float(p[y == 1].mean()))


def calibrate_rates(scores: Sequence[ScoreRecord | float], labels: Sequence[int],
                    threshold: float = DEFAULT_THRESHOLD,
                    group_keys: Optional[Sequence[str]] = None):
    """Confusion parameters (tpr, fpr) at the threshold.

    Without group_keys returns one CorrectionParams. With group_keys returns
    (params_by_group, errors_by_group); single-class groups land in errors.
    """
    from .correction import CorrectionParams

    p = np.array([s.p_ai if isinstance(s, ScoreRecord) else s for s in scores], dtype=float)
    y = np.asarray(labels, dtype=int)

    def rates(pv, yv, group=None):
        if yv.min() == yv.max():
            raise ValueError("single-class labels")
        detect = pv >= threshold
        tpr = float(detect[yv == 1].mean())
        fpr = float(detect[yv == 0].mean())
        return CorrectionParams(tpr=tpr, fpr=fpr, group_key=group)

    if group_keys is None:
        return rates(p, y)
    keys = np.asarray(group_keys)
    params, errors = {}, {}
    for g in sorted(set(keys.tolist())):
        mask = keys == g
        try:
            params[g] = rates(p[mask], y[mask], group=g)
        except ValueError as exc:
            errors[g] = str(exc)
    return params, errors
