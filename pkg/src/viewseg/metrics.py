"""Segmentation quality metrics and per-vertex uncertainty maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .fields import ProbabilityField


@dataclass
class EvalReport:
    accuracy: float
    mean_iou: float
    per_class_iou: dict[int, float]
    class_counts: dict[int, int]
    area_weighted_accuracy: float | None = None

    def to_dict(self) -> dict:
        out = {
            "accuracy": self.accuracy,
            "mean_iou": self.mean_iou,
            "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
            "class_counts": {str(k): v for k, v in self.class_counts.items()},
        }
        if self.area_weighted_accuracy is not None:
            out["area_weighted_accuracy"] = self.area_weighted_accuracy
        return out


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if pred.shape[0] != gt.shape[0]:
        raise ValidationError(
            f"prediction has {pred.shape[0]} labels but ground truth has {gt.shape[0]}"
        )
    if pred.size == 0:
        raise ValidationError("cannot evaluate empty labelings")
    return pred, gt


def accuracy(pred, gt, vertex_areas: np.ndarray | None = None) -> float:
    """Fraction of correctly labeled vertices, optionally area-weighted.

    ``vertex_areas`` holds per-vertex weights, conventionally one third of
    each vertex's incident-face area sum (see ``mesh.vertex_areas``).
    """
    pred, gt = _check_pair(pred, gt)
    correct = pred == gt
    if vertex_areas is None:
        return float(correct.mean())
    weights = np.asarray(vertex_areas, dtype=np.float64).reshape(-1)
    if weights.shape[0] != pred.shape[0]:
        raise ValidationError("vertex_areas length does not match labels")
    total = weights.sum()
    if total <= 0:
        raise ValidationError("vertex_areas sum to zero")
    return float(weights[correct].sum() / total)


def mean_iou(pred, gt, num_classes: int) -> tuple[float, dict[int, float]]:
    """Intersection over union per class and its mean.

    Classes absent from both labelings are excluded from the mean; if every
    class is absent the inputs are invalid.
    """
    pred, gt = _check_pair(pred, gt)
    if max(pred.max(), gt.max()) > num_classes or min(pred.min(), gt.min()) < 1:
        raise ValidationError("labels out of class range")
    per_class: dict[int, float] = {}
    for label in range(1, num_classes + 1):
        p = pred == label
        g = gt == label
        union = int((p | g).sum())
        if union == 0:
            continue
        per_class[label] = float((p & g).sum() / union)
    if not per_class:
        raise ValidationError("no class present in either labeling")
    return float(np.mean(list(per_class.values()))), per_class


def entropy_map(pdf: ProbabilityField) -> np.ndarray:
    """Normalized Shannon entropy per vertex: 0 = certain, 1 = uniform."""
    values = pdf.values
    if values.shape[1] < 2:
        return np.zeros(values.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(values > 0.0, values * np.log(values), 0.0)
    return np.clip(-terms.sum(axis=1) / np.log(values.shape[1]), 0.0, 1.0)


def evaluate(
    pred,
    gt,
    num_classes: int,
    vertex_areas: np.ndarray | None = None,
) -> EvalReport:
    """Full report: accuracy (plain and, when areas are given, weighted),
    per-class IoU, mean IoU and ground-truth class counts."""
    pred, gt = _check_pair(pred, gt)
    miou, per_class = mean_iou(pred, gt, num_classes)
    counts = {int(label): int((gt == label).sum()) for label in np.unique(gt)}
    weighted = None if vertex_areas is None else accuracy(pred, gt, vertex_areas)
    return EvalReport(
        accuracy=accuracy(pred, gt),
        mean_iou=miou,
        per_class_iou=per_class,
        class_counts=counts,
        area_weighted_accuracy=weighted,
    )
