"""Pool per-view predictions back onto the source mesh.

Every (view, view-vertex) pair contributes its probability row to the source
vertex it corresponds to; contributions are averaged uniformly, including
multiple vertices of the same view mapping to one source vertex. Source
vertices that receive no contribution get the uniform distribution, which is
the maximum-entropy choice and keeps downstream negative-log costs finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decompose import View
from .errors import ValidationError
from .fields import ProbabilityField


@dataclass
class AggregateResult:
    pdf: ProbabilityField
    coverage: np.ndarray  # (N,) number of contributing (view, vertex) pairs

    def __post_init__(self):
        self.coverage = np.asarray(self.coverage, dtype=np.int64).reshape(-1)
        if self.coverage.shape[0] != self.pdf.vertex_count:
            raise ValidationError("coverage length does not match pdf rows")
        if self.coverage.size and self.coverage.min() < 0:
            raise ValidationError("coverage must be nonnegative")


def project_predictions(
    view_pdfs: list[ProbabilityField],
    views: list[View],
    num_vertices: int,
    num_classes: int,
) -> AggregateResult:
    """Average all view predictions that map to each source vertex."""
    if len(view_pdfs) != len(views):
        raise ValidationError("one probability field per view is required")
    sums = np.zeros((num_vertices, num_classes))
    counts = np.zeros(num_vertices, dtype=np.int64)
    for pdf, view in zip(view_pdfs, views):
        if pdf.vertex_count != view.num_vertices:
            raise ValidationError(
                f"view {view.viewpoint.index}: {pdf.vertex_count} probability rows "
                f"for {view.num_vertices} vertices"
            )
        if pdf.num_classes != num_classes:
            raise ValidationError("all views must share the same class count")
        if view.num_vertices == 0:
            continue
        if view.correspondence.max() >= num_vertices:
            raise ValidationError("view correspondence exceeds source vertex count")
        np.add.at(sums, view.correspondence, pdf.values)
        np.add.at(counts, view.correspondence, 1)
    covered = counts > 0
    values = np.full((num_vertices, num_classes), 1.0 / num_classes)
    values[covered] = sums[covered] / counts[covered, None]
    return AggregateResult(pdf=ProbabilityField(values=values), coverage=counts)
