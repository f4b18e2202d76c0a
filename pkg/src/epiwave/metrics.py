"""Detection metrics and the per-level, per-ratio evaluation report.

Decision rule: a probability counts as a positive prediction iff it is
strictly greater than 0.5; AUC is threshold-free (rank estimator, ties count
half). Reported metric values use the percent scale 0..100.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .data import EvalSet, SegmentSet, sample_eval_set
from .errors import MappingError, SamplingInfeasibleError, UndefinedMetricError

DEFAULT_RATIOS = ((1, 5), (1, 50), (1, 500))
DECISION_THRESHOLD = 0.5


def f_beta(precision: float, recall: float, beta: float) -> float:
    """Weighted harmonic mean of precision and recall (fraction scale).

    Defined as 0 when precision and recall are both 0.
    """
    if precision == 0 and recall == 0:
        return 0.0
    b2 = beta * beta
    return (1 + b2) * precision * recall / (b2 * precision + recall)


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative,
    ties counted half (rank-based estimator)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC undefined with {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion(scores, labels, threshold: float = DECISION_THRESHOLD) -> tuple[int, int, int, int]:
    """(tp, fp, tn, fn) under the strict > threshold rule."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    pred = scores > threshold
    pos = labels == 1
    tp = int((pred & pos).sum())
    fp = int((pred & ~pos).sum())
    tn = int((~pred & ~pos).sum())
    fn = int((~pred & pos).sum())
    return tp, fp, tn, fn


@dataclass(frozen=True)
class LevelMetrics:
    """Metric values for one level on one evaluation set, percent scale."""

    precision: float
    recall: float
    f1: float
    f2: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_scores(cls, scores, labels) -> "LevelMetrics":
        tp, fp, tn, fn = confusion(scores, labels)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        return cls(
            precision=100.0 * precision,
            recall=100.0 * recall,
            f1=100.0 * f_beta(precision, recall, 1.0),
            f2=100.0 * f_beta(precision, recall, 2.0),
            auc=100.0 * auc(scores, labels),
            tp=tp, fp=fp, tn=tn, fn=fn,
        )


@dataclass
class MetricsReport:
    """per-ratio x per-level metrics plus run metadata (seed, config hash)."""

    results: dict  # ratio label -> level -> LevelMetrics
    metadata: dict

    def to_dict(self) -> dict:
        return {
            "results": {
                ratio: {level: asdict(m) for level, m in levels.items()}
                for ratio, levels in self.results.items()
            },
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "MetricsReport":
        results = {
            ratio: {level: LevelMetrics(**vals) for level, vals in levels.items()}
            for ratio, levels in payload["results"].items()
        }
        return cls(results=results, metadata=payload.get("metadata", {}))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def rows(self) -> list[dict]:
        out = []
        for ratio, levels in self.results.items():
            for level, m in levels.items():
                out.append({"ratio": ratio, "level": level, **asdict(m)})
        return out

    def grid_text(self) -> str:
        """Fixed-width levels x ratios x metrics table for terminal output."""
        cols = ["precision", "recall", "f1", "f2", "auc"]
        lines = []
        header = f"{'level':<9}{'ratio':<8}" + "".join(f"{c:>11}" for c in cols)
        lines.append(header)
        lines.append("-" * len(header))
        for level in ("channel", "region", "patient"):
            for ratio, levels in self.results.items():
                if level not in levels:
                    continue
                m = levels[level]
                vals = "".join(f"{getattr(m, c):>11.2f}" for c in cols)
                lines.append(f"{level:<9}{ratio:<8}" + vals)
        return "\n".join(lines)


def ratio_label(ratio: tuple[int, int]) -> str:
    return f"{ratio[0]}:{ratio[1]}"


def make_eval_sets(segments: SegmentSet, ratios=DEFAULT_RATIOS,
                   count_positive: int | None = None, seed: int = 0) -> dict:
    """One EvalSet per ratio.  When count_positive is None the same count is
    used for every ratio: the largest making the most imbalanced one feasible."""
    n_pos = int((segments.channel_labels == 1).sum())
    n_neg = int((segments.channel_labels == 0).sum())
    if count_positive is None:
        max_den = max(den for _, den in ratios)
        count_positive = min(n_pos, n_neg // max_den)
        if count_positive < 1:
            raise SamplingInfeasibleError(
                f"cannot build a 1:{max_den} set from {n_pos} positive / "
                f"{n_neg} negative pairs")
    sets = {}
    for i, ratio in enumerate(ratios):
        sets[ratio_label(ratio)] = sample_eval_set(
            segments, ratio, count_positive, seed + i)
    return sets


def metrics_for_eval_set(scores: dict, segments: SegmentSet,
                         eval_set: EvalSet) -> dict:
    """LevelMetrics per level for one ratio-controlled subset.

    scores: full-span per-level score arrays (channel (S, C), region (S, |B|),
    patient (S,)) aligned with `segments`.
    """
    if eval_set.source_n_segments != segments.n_segments:
        raise MappingError("eval set was drawn from a different segment set")
    idx = eval_set.segment_indices
    out = {}
    mask = eval_set.pair_mask
    out["channel"] = LevelMetrics.from_scores(
        scores["channel"][idx][mask], segments.channel_labels[idx][mask])
    rmask = eval_set.region_mask(segments.channel_map)
    out["region"] = LevelMetrics.from_scores(
        scores["region"][idx][rmask], segments.region_labels[idx][rmask])
    smask = eval_set.segment_mask()
    out["patient"] = LevelMetrics.from_scores(
        scores["patient"][idx][smask], segments.patient_labels[idx][smask])
    return out


def evaluate(model, segments: SegmentSet, eval_sets: dict,
             metadata: dict | None = None) -> MetricsReport:
    """Score the full span once (diffusion context intact), then compute the
    metric grid over each ratio-controlled subset."""
    if model.channel_map.to_dict() != segments.channel_map.to_dict():
        raise MappingError("model and segments use different channel maps")
    scores = model.score_segments(segments.data)
    results = {
        label: metrics_for_eval_set(scores, segments, eval_set)
        for label, eval_set in eval_sets.items()
    }
    return MetricsReport(results=results, metadata=metadata or {})
