"""
Evaluation metrics: ROC/AUC, accuracy/F1 and percentile bootstrap intervals.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

MAX_REDRAWS = 10


class MetricError(ValueError):
    """Raised when a metric is undefined for the given sample"""
    pass


def _arrays(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if scores.shape != labels.shape:
        raise MetricError(f"{scores.size} scores but {labels.size} labels")
    if scores.size == 0:
        raise MetricError("metrics need at least one sample")
    return scores, labels


def roc_auc(scores, labels) -> float:
    """Mann-Whitney statistic with midranks for ties"""
    scores, labels = _arrays(scores, labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes")
    ranks = rankdata(scores)
    rank_sum = float(np.sum(ranks[labels == 1]))
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_curve(scores, labels) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """False/true positive rates at each distinct score threshold, highest first"""
    scores, labels = _arrays(scores, labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC curve needs both classes")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores, sorted_labels = scores[order], labels[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(sorted_scores)), sorted_scores.size - 1]
    tps = np.cumsum(sorted_labels)[last_of_run]
    fps = (last_of_run + 1) - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    thresholds = np.r_[np.inf, sorted_scores[last_of_run]]
    return fpr, tpr, thresholds


def acc_f1(scores, labels, threshold: float = 0.5) -> Tuple[float, float]:
    scores, labels = _arrays(scores, labels)
    preds = (scores >= threshold).astype(np.int64)
    tp = int(np.sum((preds == 1) & (labels == 1)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    acc = float(np.mean(preds == labels))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return acc, f1


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    return acc_f1(scores, labels, threshold)[0]


def f1_score(scores, labels, threshold: float = 0.5) -> float:
    return acc_f1(scores, labels, threshold)[1]


def bootstrap_ci(scores, labels, metric: Callable[[np.ndarray, np.ndarray], float],
                 n_resamples: int = 1000, seed: int = 0) -> Tuple[float, float]:
    """
    95% percentile interval of ``metric`` over resamples drawn with replacement.

    Single-class resamples are redrawn up to 10 times and then skipped.

    Raises:
        MetricError: if the metric is undefined on every resample
    """
    if n_resamples < 100:
        raise ValueError(f"n_resamples must be >= 100, got {n_resamples}")
    scores, labels = _arrays(scores, labels)
    rng = np.random.default_rng(seed)
    n = scores.size
    stats: List[float] = []
    skipped = 0
    for _ in range(n_resamples):
        for _attempt in range(MAX_REDRAWS):
            index = rng.integers(0, n, size=n)
            if np.unique(labels[index]).size == 2:
                break
        else:
            skipped += 1
            continue
        try:
            stats.append(float(metric(scores[index], labels[index])))
        except MetricError:
            skipped += 1
    if not stats:
        raise MetricError("metric undefined on every bootstrap resample")
    if skipped:
        logger.warning(f"⚠️ Skipped {skipped} of {n_resamples} bootstrap resamples")
    lo, hi = np.percentile(stats, [2.5, 97.5])
    return float(lo), float(hi)


@dataclass
class MetricEstimate:
    point: float
    lo: float
    hi: float


@dataclass
class EvalReport:
    level: str
    n_samples: int
    seed: int
    threshold: float
    auc: Optional[MetricEstimate]
    acc: MetricEstimate
    f1: MetricEstimate
    roc: Dict[str, List[float]] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())


def _estimate(point: float, scores, labels, metric, n_resamples: int, seed: int) -> MetricEstimate:
    try:
        lo, hi = bootstrap_ci(scores, labels, metric, n_resamples, seed)
    except MetricError as e:
        logger.warning(f"⚠️ No confidence interval: {e}")
        return MetricEstimate(point, point, point)
    # the percentile interval can miss the observed value on tiny samples
    return MetricEstimate(point, min(lo, point), max(hi, point))


def build_report(scores: Sequence[float], labels: Sequence[int], level: str = "patient", threshold: float = 0.5,
                 n_resamples: int = 1000, seed: int = 0) -> EvalReport:
    scores, labels = _arrays(scores, labels)
    acc, f1 = acc_f1(scores, labels, threshold)

    auc = None
    roc: Dict[str, List[float]] = {}
    if np.unique(labels).size == 2:
        auc = _estimate(roc_auc(scores, labels), scores, labels, roc_auc, n_resamples, seed)
        fpr, tpr, thresholds = roc_curve(scores, labels)
        roc = {"fpr": fpr.tolist(), "tpr": tpr.tolist(),
               "thresholds": [None if np.isinf(t) else float(t) for t in thresholds]}
    else:
        logger.warning(f"⚠️ {level}-level labels are single-class; AUC undefined")

    return EvalReport(
        level=level,
        n_samples=int(scores.size),
        seed=seed,
        threshold=threshold,
        auc=auc,
        acc=_estimate(acc, scores, labels, lambda s, l: accuracy(s, l, threshold), n_resamples, seed),
        f1=_estimate(f1, scores, labels, lambda s, l: f1_score(s, l, threshold), n_resamples, seed),
        roc=roc,
    )
