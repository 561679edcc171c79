import numpy as np
import pytest

from viewseg.aggregate import AggregateResult, project_predictions
from viewseg.errors import ValidationError
from viewseg.fields import ProbabilityField

from conftest import make_grid_view
from oracles import brute_aggregate


def random_instance(rng, num_vertices, num_views, num_classes):
    views, pdfs = [], []
    for m in range(num_views):
        size = int(rng.integers(1, 3 * num_vertices))
        corr = rng.integers(0, num_vertices, size=size)
        mask = np.zeros((1, size), dtype=bool)
        mask[0, :] = True
        views.append(
            make_grid_view(mask, seed=int(rng.integers(1 << 30)),
                           num_sources=num_vertices, correspondence=corr)
        )
        values = rng.random((size, num_classes)) + 1e-3
        values /= values.sum(axis=1, keepdims=True)
        pdfs.append(ProbabilityField(values))
    return pdfs, views


class TestProjectPredictions:
    def test_identity_correspondence_passthrough(self):
        rng = np.random.default_rng(0)
        mask = np.ones((1, 6), dtype=bool)
        view = make_grid_view(mask, num_sources=6, correspondence=np.arange(6))
        values = rng.random((6, 4))
        values /= values.sum(axis=1, keepdims=True)
        result = project_predictions([ProbabilityField(values)], [view], 6, 4)
        np.testing.assert_array_equal(result.pdf.values, values)
        np.testing.assert_array_equal(result.coverage, np.ones(6, dtype=np.int64))

    def test_two_contributions_average(self):
        view = make_grid_view(np.ones((1, 2), dtype=bool), num_sources=1,
                              correspondence=np.zeros(2, dtype=np.int64))
        values = np.array([[0.2, 0.8], [0.6, 0.4]])
        result = project_predictions([ProbabilityField(values)], [view], 1, 2)
        np.testing.assert_allclose(result.pdf.values[0], [0.4, 0.6])
        assert result.coverage[0] == 2

    def test_uncovered_vertex_gets_uniform(self):
        view = make_grid_view(np.ones((1, 1), dtype=bool), num_sources=3,
                              correspondence=np.array([1]))
        values = np.array([[1.0] + [0.0] * 9])
        result = project_predictions([ProbabilityField(values)], [view], 3, 10)
        np.testing.assert_allclose(result.pdf.values[0], 0.1)
        np.testing.assert_allclose(result.pdf.values[2], 0.1)
        np.testing.assert_array_equal(result.coverage, [0, 1, 0])

    def test_matches_pair_binning_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            num_vertices = int(rng.integers(2, 60))
            num_views = int(rng.integers(1, 5))
            num_classes = int(rng.integers(2, 6))
            pdfs, views = random_instance(rng, num_vertices, num_views, num_classes)
            result = project_predictions(pdfs, views, num_vertices, num_classes)
            expected, counts = brute_aggregate(
                [p.values for p in pdfs], [v.correspondence for v in views],
                num_vertices, num_classes,
            )
            np.testing.assert_allclose(result.pdf.values, expected, rtol=1e-12, atol=1e-12)
            np.testing.assert_array_equal(result.coverage, counts)

    def test_rows_always_sum_to_one(self):
        rng = np.random.default_rng(6)
        pdfs, views = random_instance(rng, 40, 3, 5)
        result = project_predictions(pdfs, views, 40, 5)
        np.testing.assert_allclose(result.pdf.values.sum(axis=1), 1.0, atol=1e-9)

    def test_view_order_equivariance(self):
        rng = np.random.default_rng(7)
        pdfs, views = random_instance(rng, 25, 4, 3)
        forward_order = project_predictions(pdfs, views, 25, 3)
        reverse_order = project_predictions(pdfs[::-1], views[::-1], 25, 3)
        np.testing.assert_allclose(
            forward_order.pdf.values, reverse_order.pdf.values, rtol=1e-12, atol=1e-12
        )
        np.testing.assert_array_equal(forward_order.coverage, reverse_order.coverage)

    def test_row_count_mismatch_rejected(self):
        view = make_grid_view(np.ones((1, 3), dtype=bool), num_sources=3)
        values = np.full((2, 2), 0.5)
        with pytest.raises(ValidationError):
            project_predictions([ProbabilityField(values)], [view], 3, 2)

    def test_class_count_mismatch_rejected(self):
        view = make_grid_view(np.ones((1, 2), dtype=bool), num_sources=2)
        values = np.full((2, 2), 0.5)
        with pytest.raises(ValidationError):
            project_predictions([ProbabilityField(values)], [view], 2, 3)

    def test_result_invariants_enforced(self):
        with pytest.raises(ValidationError):
            AggregateResult(
                pdf=ProbabilityField(np.full((2, 2), 0.5)),
                coverage=np.array([1, -1]),
            )
