"""Per-vertex probability distributions passed between pipeline stages."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

ROW_SUM_TOL = 1e-9


@dataclass
class ProbabilityField:
    """Rows of per-vertex class probabilities.

    ``values`` has shape ``(vertex_count, num_classes)``; every row is a
    distribution: nonnegative entries summing to 1 within ``ROW_SUM_TOL``.
    """

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValidationError(f"probability field must be 2-D, got shape {values.shape}")
        self.values = values
        self.validate()

    @property
    def vertex_count(self) -> int:
        return self.values.shape[0]

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]

    def validate(self, tol: float = ROW_SUM_TOL) -> None:
        if self.values.size == 0:
            return
        if not np.isfinite(self.values).all():
            raise ValidationError("probability field contains non-finite entries")
        if (self.values < 0.0).any():
            raise ValidationError("probability field contains negative entries")
        sums = self.values.sum(axis=1)
        bad = np.abs(sums - 1.0) > tol
        if bad.any():
            idx = int(np.flatnonzero(bad)[0])
            raise ValidationError(
                f"probability row {idx} sums to {sums[idx]!r}, expected 1 within {tol}"
            )


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, numerically stable."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)
