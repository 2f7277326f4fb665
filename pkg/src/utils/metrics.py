"""
Classification Metrics

AUC (Mann-Whitney), precision / recall at a threshold, fold aggregation and
the paired comparison of two runs over a shared fold plan.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy import stats

from src.utils.exceptions import ContractViolation, UndefinedMetricError

logger = logging.getLogger(__name__)

PAIRWISE_LIMIT = 10_000
PAIRED_TEST = "paired-t"
CONSTANT_DIFF_TOL = 1e-12


def _as_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ContractViolation(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isin(y, (0, 1))):
        raise ContractViolation("labels must be binary 0/1")
    return s, y.astype(np.int64)


def _check_both_classes(y):
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    return n_pos, n_neg


def auc_pairwise(scores, labels):
    """P(score_pos > score_neg) + 0.5 P(tie) by counting every pair"""
    s, y = _as_binary(scores, labels)
    n_pos, n_neg = _check_both_classes(y)
    pos = s[y == 1][:, None]
    neg = s[y == 0][None, :]
    wins = np.count_nonzero(pos > neg)
    ties = np.count_nonzero(pos == neg)
    return (wins + 0.5 * ties) / (n_pos * n_neg)


def auc_rank_sum(scores, labels):
    """Same quantity through the rank-sum statistic with average ranks for ties"""
    s, y = _as_binary(scores, labels)
    n_pos, n_neg = _check_both_classes(y)
    ranks = stats.rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(scores, labels):
    """
    Area under the ROC curve

    Args:
        scores: Predicted probabilities (any monotone score works)
        labels: Binary labels, both classes present

    Returns:
        auc: Value in [0, 1]
    """
    if np.size(scores) <= PAIRWISE_LIMIT:
        return float(auc_pairwise(scores, labels))
    return auc_rank_sum(scores, labels)


def confusion_counts(scores, labels, threshold=0.5):
    """TP / FP / TN / FN with score >= threshold predicted positive"""
    s, y = _as_binary(scores, labels)
    pred = s >= threshold
    return {
        "tp": int(np.count_nonzero(pred & (y == 1))),
        "fp": int(np.count_nonzero(pred & (y == 0))),
        "tn": int(np.count_nonzero(~pred & (y == 0))),
        "fn": int(np.count_nonzero(~pred & (y == 1))),
    }


def precision_recall_from_counts(counts):
    """
    Precision and recall from a confusion dict

    Returns:
        precision: TP / (TP + FP), or None when nothing is predicted positive
        recall: TP / (TP + FN), or None when there are no positives
    """
    tp, fp, fn = counts["tp"], counts["fp"], counts["fn"]
    precision = tp / (tp + fp) if tp + fp > 0 else None
    recall = tp / (tp + fn) if tp + fn > 0 else None
    if precision is None:
        logger.warning("No predicted positives; precision is undefined")
    return precision, recall


def precision_recall(scores, labels, threshold=0.5):
    return precision_recall_from_counts(confusion_counts(scores, labels, threshold))


def paired_pvalue(auc_folds_a, auc_folds_b):
    """
    Two-sided paired t-test on per-fold AUC differences

    Args:
        auc_folds_a: Per-fold AUCs of run A
        auc_folds_b: Per-fold AUCs of run B on the same folds

    Returns:
        p: p-value in [0, 1]; 1.0 when every difference is zero
    """
    a = np.asarray(auc_folds_a, dtype=np.float64)
    b = np.asarray(auc_folds_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"paired comparison needs equal lengths, got {a.size} and {b.size}")
    k = a.size
    if k < 2:
        raise ContractViolation("paired comparison needs at least 2 folds")
    d = a - b
    if np.all(d == 0):
        return 1.0
    # constant nonzero difference up to rounding: zero variance, t is infinite
    if d.std(ddof=1) <= CONSTANT_DIFF_TOL:
        return 0.0
    p = stats.ttest_rel(a, b).pvalue
    return float(min(max(p, 0.0), 1.0))


def summarize(values):
    """
    Mean and sample std (n-1) in percent

    Args:
        values: Per-fold fractions; None entries are skipped

    Returns:
        (mean, std) in percent, or (None, None) when nothing is defined
    """
    vals = np.array([v for v in values if v is not None], dtype=np.float64) * 100.0
    if vals.size == 0:
        return None, None
    std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return float(vals.mean()), std


@dataclass
class MetricSummary:
    auc_mean: Optional[float]
    auc_std: Optional[float]
    precision_mean: Optional[float]
    precision_std: Optional[float]
    recall_mean: Optional[float]
    recall_std: Optional[float]
    n_folds: int

    def to_dict(self):
        return asdict(self)

    def format_line(self):
        """Table style: `AUC 78.6 ± 1.1 | Precision ... | Recall ...`"""

        def fmt(mean, std):
            return "n/a" if mean is None else f"{mean:.1f} ± {std:.1f}"

        return (
            f"AUC {fmt(self.auc_mean, self.auc_std)} | "
            f"Precision {fmt(self.precision_mean, self.precision_std)} | "
            f"Recall {fmt(self.recall_mean, self.recall_std)}"
        )


def _field(result, name):
    return result[name] if isinstance(result, dict) else getattr(result, name)


def aggregate(fold_results):
    """
    Collapse per-fold metrics into mean ± std

    Args:
        fold_results: Sequence of objects / dicts with auc, precision, recall (fractions)

    Returns:
        summary: MetricSummary in percent
    """
    auc_m, auc_s = summarize([_field(r, "auc") for r in fold_results])
    pre_m, pre_s = summarize([_field(r, "precision") for r in fold_results])
    rec_m, rec_s = summarize([_field(r, "recall") for r in fold_results])
    return MetricSummary(auc_m, auc_s, pre_m, pre_s, rec_m, rec_s, n_folds=len(fold_results))
