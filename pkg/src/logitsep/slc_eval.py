"""Single-logit classification metrics.

For each class j the examples are ranked by a score (the raw logit z_j, or
the softmax probability when all logits are available) and the binary task
"is this example of class j?" is evaluated over every threshold.  A point on
the curve with threshold ``s`` is the operating point that predicts positive
for every score ``>= s``, i.e. the rule ``score > T`` for ``T`` just below
``s``.  Tied scores always enter the positive set together.

AUPRC is the step-wise (average-precision) area ``sum (R_n - R_{n-1}) P_n``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainError
from .network import MlpModel, features, forward_all, single_logit_column

log = logging.getLogger(__name__)

RECALL_LEVELS = {"p_at_090": 0.9, "p_at_099": 0.99}
METRICS = ("auprc", "p_at_090", "p_at_099")
EVAL_MODES = ("single_logit", "all_logits_softmax")


@dataclass(frozen=True)
class PRCurve:
    """Operating points in decreasing threshold order (recall non-decreasing along the arrays)."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    positives: int
    negatives: int
    class_id: Optional[int] = None

    def __len__(self) -> int:
        return self.thresholds.size

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.precision.tolist(), self.recall.tolist()))


def pr_curve(scores, labels, class_id: Optional[int] = None) -> PRCurve:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise DomainError(f"{scores.size} scores but {labels.size} labels")
    if not np.isfinite(scores).all():
        raise DomainError("scores must be finite")
    who = "" if class_id is None else f"class {class_id}: "
    positives = int(labels.sum())
    negatives = int(labels.size - positives)
    if positives == 0:
        raise DomainError(f"{who}no positive examples, precision-recall is undefined")
    if negatives == 0:
        raise DomainError(f"{who}no negative examples, precision-recall is undefined")

    order = np.argsort(-scores, kind="stable")
    ranked = scores[order]
    hits = labels[order]
    tp = np.cumsum(hits)
    seen = np.arange(1, ranked.size + 1)
    group_end = np.append(ranked[1:] != ranked[:-1], True)
    tp = tp[group_end]
    seen = seen[group_end]
    return PRCurve(
        thresholds=ranked[group_end],
        precision=tp / seen,
        recall=tp / positives,
        positives=positives,
        negatives=negatives,
        class_id=class_id,
    )


def auprc(curve: PRCurve) -> float:
    gains = np.diff(curve.recall, prepend=0.0)
    return float(np.sum(gains * curve.precision))


def precision_at_recall(curve: PRCurve, r: float) -> float:
    """Precision at the largest threshold whose recall reaches ``r``."""
    if not 0 < r <= 1:
        raise DomainError(f"recall level must be in (0, 1], got {r}")
    idx = int(np.argmax(curve.recall >= r))
    return float(curve.precision[idx])


@dataclass
class ClassMetrics:
    class_id: int
    auprc: float
    p_at_090: float
    p_at_099: float

    def to_dict(self) -> dict:
        return {"class": self.class_id, "auprc": self.auprc, "p_at_090": self.p_at_090, "p_at_099": self.p_at_099}


@dataclass
class SlcReport:
    mode: str
    per_class: list[ClassMetrics]
    macro: dict[str, float]
    warnings: list[str] = field(default_factory=list)

    @property
    def one_minus_macro(self) -> dict[str, float]:
        return {name: 1.0 - value for name, value in self.macro.items()}

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "per_class": [c.to_dict() for c in self.per_class],
            "macro": dict(self.macro),
            "one_minus_macro": self.one_minus_macro,
            "warnings": list(self.warnings),
        }


def class_metrics(scores, labels, class_id: int) -> ClassMetrics:
    curve = pr_curve(scores, labels, class_id)
    return ClassMetrics(
        class_id,
        auprc(curve),
        precision_at_recall(curve, RECALL_LEVELS["p_at_090"]),
        precision_at_recall(curve, RECALL_LEVELS["p_at_099"]),
    )


def report_from_scores(scores: np.ndarray, labels: np.ndarray, mode: str) -> SlcReport:
    """Per-class metrics from an (n, k) score matrix; classes without positives are skipped."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    per_class, warnings = [], []
    for j in range(scores.shape[1]):
        is_j = labels == j
        if not is_j.any() or is_j.all():
            msg = f"class {j} skipped: {'no' if not is_j.any() else 'only'} examples of this class in the evaluation set"
            log.warning(msg)
            warnings.append(msg)
            continue
        per_class.append(class_metrics(scores[:, j], is_j, j))
    if not per_class:
        raise DomainError("no class could be evaluated")
    macro = {name: float(np.mean([getattr(c, name) for c in per_class])) for name in METRICS}
    return SlcReport(mode, per_class, macro, warnings)


def softmax_scores(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def slc_scores(model: MlpModel, x: np.ndarray, mode: str = "single_logit") -> np.ndarray:
    """(n, k) scores: column j holds what a class-j query would see."""
    if mode == "single_logit":
        h = features(model, x)
        return np.stack([single_logit_column(model, h, j) for j in range(model.num_classes)], axis=1)
    if mode == "all_logits_softmax":
        return softmax_scores(forward_all(model, x))
    raise DomainError(f"mode must be one of {EVAL_MODES}, got {mode!r}")


def evaluate_slc(model: MlpModel, dataset, mode: str = "single_logit") -> SlcReport:
    """Score every class on ``dataset`` (anything with ``features``/``labels``) and macro-average."""
    scores = slc_scores(model, dataset.features, mode)
    return report_from_scores(scores, dataset.labels, mode)
