"""
Classification metrics and fold aggregation.

Per-class recall and F1 are macro-averaged over the classes that occur in the
labels. Fold aggregates are mean and population SD unless sample SD is asked for.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from config import CLASSES
from services.errors import MetricsError
from services.run_log import get_logger

log = get_logger('METRICS')

BINARY_TASKS = (("AD", "CTL"), ("AD", "MCI"), ("MCI", "CTL"))
METRIC_NAMES = ("accuracy", "recall", "f1")


@dataclass
class Scores:
    accuracy: float
    recall: float
    f1: float
    warnings: list = field(default_factory=list)

    def as_tuple(self):
        return self.accuracy, self.recall, self.f1

    def to_dict(self):
        return {"accuracy": self.accuracy, "recall": self.recall, "f1": self.f1}


def per_class(preds, labels, classes):
    """{class: (recall, f1)} for the classes present in labels."""
    out = {}
    for c in classes:
        tp = int(np.sum((preds == c) & (labels == c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        if tp + fn:
            out[c] = (tp / (tp + fn), 2 * tp / (2 * tp + fp + fn))
    return out


def metrics(preds, labels, classes=tuple(range(len(CLASSES)))):
    """Accuracy, macro recall and macro F1 of integer predictions against labels."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.size == 0 or labels.size == 0:
        raise MetricsError("metrics need at least one prediction")
    if preds.shape != labels.shape:
        raise MetricsError(f"{preds.size} predictions for {labels.size} labels")
    if not np.isin(labels, classes).all():
        raise MetricsError("labels outside the class set")

    scores = per_class(preds, labels, classes)
    warnings = []
    for c in classes:
        if c not in scores:
            msg = f"class {c} absent from labels; excluded from macro averages"
            log.warning(msg)
            warnings.append(msg)
    recall = float(np.mean([r for r, _ in scores.values()]))
    f1 = float(np.mean([f for _, f in scores.values()]))
    return Scores(float(np.mean(preds == labels)), recall, f1, warnings)


def binary_metrics(probs, labels, positive, negative):
    """Two-class task restricted to samples of those classes; argmax over the two probabilities."""
    a, b = CLASSES.index(positive), CLASSES.index(negative)
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    keep = (labels == a) | (labels == b)
    if not keep.any():
        return None
    preds = np.where(probs[keep, a] >= probs[keep, b], a, b)
    return metrics(preds, labels[keep], (a, b))


def aggregate(values, sample_sd=False):
    """(mean, SD) of per-fold values; population SD unless sample_sd."""
    values = [float(v) for v in values]
    if not values:
        raise MetricsError("nothing to aggregate")
    mean = math.fsum(values) / len(values)
    ddof = 1 if sample_sd and len(values) > 1 else 0
    var = math.fsum((v - mean) ** 2 for v in values) / (len(values) - ddof)
    return mean, math.sqrt(var)


def summarise(fold_scores, sample_sd=False):
    """Aggregate block for a list of per-fold score dicts."""
    out = {}
    for name in METRIC_NAMES:
        mean, sd = aggregate([s[name] for s in fold_scores], sample_sd)
        out[name] = {"mean": mean, "sd": sd, "summary": f"{100 * mean:.2f} ± {100 * sd:.2f}"}
    return out


def evaluate_probs(probs, labels):
    """Three-class scores plus the binary sub-reports for one evaluation."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    scores = metrics(probs.argmax(axis=1), labels)
    report = scores.to_dict()
    report["binary"] = {}
    for pos, neg in BINARY_TASKS:
        sub = binary_metrics(probs, labels, pos, neg)
        if sub is not None:
            report["binary"][f"{pos}_vs_{neg}"] = sub.to_dict()
    report["warnings"] = scores.warnings
    return report
