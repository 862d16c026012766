"""Thresholds from negative-model statistics, per-metric voting and ROC/AUC."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import jsonio
from .metrics import BLACKBOX_METRICS, MetricReport

log = logging.getLogger(__name__)

DEFAULT_CONFIDENCE = 0.99
DEFAULT_ALPHA_BLACKBOX = 0.9
DEFAULT_ALPHA_WHITEBOX = 0.6
RECOMMENDED_NEGATIVES = 8


class InsufficientNegatives(ValueError):
    pass


class Undecidable(ValueError):
    """No metric could be applied to the suspect."""


def t_quantile(p: float, df: float) -> float:
    """Inverse CDF of Student's t distribution with ``df`` degrees of freedom."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if not df >= 1:
        raise ValueError(f"df must be >= 1, got {df}")
    if p == 0.5:
        return 0.0
    return float(special.stdtrit(df, p))


@dataclass
class NegativeStats:
    """Scores of independently built models, per metric."""

    scores: dict[str, list[float]]

    def __post_init__(self):
        for metric, values in self.scores.items():
            arr = np.asarray(values, dtype=np.float64)
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ValueError(f"{metric}: negative scores must be finite and nonnegative")

    @classmethod
    def from_reports(cls, reports: list[list[MetricReport]]) -> "NegativeStats":
        out: dict[str, list[float]] = {}
        for per_model in reports:
            for r in per_model:
                out.setdefault(r.metric, []).append(r.value)
        return cls(out)


@dataclass
class Threshold:
    lb: float
    alpha: float
    tau: float
    n: int
    mean: float
    sd: float


@dataclass
class ThresholdSet:
    confidence: float
    thresholds: dict[str, Threshold]

    def to_dict(self) -> dict:
        return {
            "format_version": jsonio.FORMAT_VERSION,
            "confidence": self.confidence,
            "metrics": {m: {"lb": t.lb, "alpha": t.alpha, "tau": t.tau, "n": t.n, "mean": t.mean, "sd": t.sd}
                        for m, t in self.thresholds.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdSet":
        try:
            return cls(float(d["confidence"]),
                       {m: Threshold(float(t["lb"]), float(t["alpha"]), float(t["tau"]), int(t["n"]),
                                     float(t["mean"]), float(t["sd"])) for m, t in d["metrics"].items()})
        except (KeyError, TypeError) as exc:
            raise jsonio.FormatError(f"thresholds: missing or malformed field {exc}") from None


def lower_bound(values, confidence: float = DEFAULT_CONFIDENCE) -> tuple[float, float, float]:
    """One-sided lower confidence bound of the mean, clamped at 0.  Returns (lb, mean, sd)."""
    arr = np.asarray(values, dtype=np.float64)
    n = len(arr)
    if n < 2:
        raise InsufficientNegatives(f"need at least 2 negative scores, got {n}")
    mean = float(np.mean(arr))
    sd = float(np.std(arr, ddof=1))
    lb = mean - t_quantile(confidence, n - 1) * sd / math.sqrt(n)
    return max(lb, 0.0), mean, sd


def calibrate(stats: NegativeStats, alpha_blackbox: float = DEFAULT_ALPHA_BLACKBOX,
              alpha_whitebox: float = DEFAULT_ALPHA_WHITEBOX,
              confidence: float = DEFAULT_CONFIDENCE) -> ThresholdSet:
    """Threshold ``alpha * LB`` per metric, LB the lower confidence bound of the negatives' mean."""
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    if alpha_blackbox < 0 or alpha_whitebox < 0:
        raise ValueError("alpha must be >= 0")
    out = {}
    for metric, values in stats.scores.items():
        lb, mean, sd = lower_bound(values, confidence)
        n = len(values)
        if n < RECOMMENDED_NEGATIVES:
            warnings.warn(f"{metric}: only {n} negative models; at least {RECOMMENDED_NEGATIVES} are recommended",
                          stacklevel=2)
        alpha = alpha_blackbox if metric in BLACKBOX_METRICS else alpha_whitebox
        out[metric] = Threshold(lb, alpha, alpha * lb, n, mean, sd)
    return ThresholdSet(confidence, out)


@dataclass
class Vote:
    metric: str
    score: float | None
    tau: float | None
    vote: str               # "copy", "not-copy" or "n/a"


@dataclass
class Verdict:
    votes: list[Vote]
    p_copy: float
    decision: str           # "Yes" or "No"

    @property
    def copies(self) -> int:
        return sum(v.vote == "copy" for v in self.votes)

    @property
    def applicable(self) -> int:
        return sum(v.vote != "n/a" for v in self.votes)

    def summary(self) -> str:
        return f"Copy: {self.decision.upper()} ({self.copies}/{self.applicable})"

    def to_dict(self) -> dict:
        return {
            "votes": [{"metric": v.metric, "score": v.score, "tau": v.tau, "vote": v.vote} for v in self.votes],
            "copies": self.copies,
            "applicable": self.applicable,
            "p_copy": self.p_copy,
            "decision": self.decision,
        }


def vote(reports: list[MetricReport], thresholds: ThresholdSet, metrics=None) -> Verdict:
    """A metric votes copy when its score is at or below its threshold.

    ``metrics`` lists the metrics to tally (default: every calibrated one);
    those without a score are recorded as not applicable.
    """
    by_metric = {r.metric: r for r in reports}
    names = list(metrics) if metrics is not None else list(thresholds.thresholds)
    votes = []
    for m in names:
        r = by_metric.get(m)
        t = thresholds.thresholds.get(m)
        if r is None:
            votes.append(Vote(m, None, t.tau if t else None, "n/a"))
            continue
        if t is None:
            raise ValueError(f"no threshold for metric {m}")
        votes.append(Vote(m, float(r.value), t.tau, "copy" if r.value <= t.tau else "not-copy"))
    applicable = [v for v in votes if v.vote != "n/a"]
    if not applicable:
        raise Undecidable("no applicable metric")
    p = sum(v.vote == "copy" for v in applicable) / len(applicable)
    return Verdict(votes, p, "Yes" if p > 0.5 else "No")


def roc_auc(positive_scores, negative_scores) -> tuple[list[tuple[float, float]], float]:
    """ROC points (false-positive rate, true-positive rate) and trapezoid AUC.

    Lower scores mean "positive".  The threshold sweeps every distinct score,
    so tied scores move both rates at once (a diagonal step worth half).
    """
    pos = np.asarray(positive_scores, dtype=np.float64)
    neg = np.asarray(negative_scores, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("both score lists must be nonempty")
    points = [(0.0, 0.0)]
    for t in np.unique(np.concatenate([pos, neg])):
        points.append((float(np.mean(neg <= t)), float(np.mean(pos <= t))))
    auc = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        auc += (x1 - x0) * (y0 + y1) / 2.0
    return points, float(auc)
