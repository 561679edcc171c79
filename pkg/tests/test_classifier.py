import numpy as np
import pytest

from viewseg.classifier import (
    ClassifierParams,
    ConvLayer,
    DenseLayer,
    adam_step,
    backward,
    backward_from_probability_grad,
    build_pseudo_coords,
    conv_forward,
    cross_entropy_loss,
    forward,
    from_architecture,
    init_adam_state,
    init_params,
    parameter_count,
    softplus,
    softplus_inverse,
)
from viewseg.errors import ConfigError, NumericsError, ValidationError

from conftest import make_grid_view
from oracles import finite_difference, max_relative_error


def small_params(seed=0, num_classes=3, radius=1):
    """Tiny architecture for exhaustive gradient checks."""
    return init_params(
        num_classes,
        conv_channels=(5, 4),
        num_gaussians=2,
        dense_channels=(6,),
        radius=radius,
        seed=seed,
    )


class TestPseudoCoords:
    def test_isolated_vertex_pairs_with_itself(self):
        view = make_grid_view([[True]])
        pc = build_pseudo_coords(view, radius=2)
        assert pc.pairs_for(0) == [(0, (0.0, 0.0))]

    def test_full_block_center_has_nine_neighbors(self):
        view = make_grid_view(np.ones((3, 3), dtype=bool))
        pc = build_pseudo_coords(view, radius=1)
        center = 4  # row-major order
        pairs = pc.pairs_for(center)
        assert len(pairs) == 9
        offsets = sorted(offset for _, offset in pairs)
        expected = sorted((float(dr), float(dc)) for dr in (-1, 0, 1) for dc in (-1, 0, 1))
        assert offsets == expected

    def test_corner_vertex_has_four_neighbors(self):
        view = make_grid_view(np.ones((3, 3), dtype=bool))
        pc = build_pseudo_coords(view, radius=1)
        assert len(pc.pairs_for(0)) == 4  # self, right, down, diagonal

    def test_every_vertex_contains_self_offset_zero(self):
        rng = np.random.default_rng(0)
        view = make_grid_view(rng.random((6, 7)) < 0.5, seed=1)
        pc = build_pseudo_coords(view, radius=2)
        for v in range(view.num_vertices):
            assert (v, (0.0, 0.0)) in pc.pairs_for(v)

    def test_offsets_normalized_to_unit_box(self):
        view = make_grid_view(np.ones((5, 5), dtype=bool))
        pc = build_pseudo_coords(view, radius=2)
        assert pc.offsets.min() >= -1.0 and pc.offsets.max() <= 1.0

    def test_empty_view_rejected(self, square_mesh):
        view = make_grid_view(np.ones((2, 2), dtype=bool))
        object.__setattr__(view, "grid_pos", view.grid_pos[:0])
        with pytest.raises(Exception):
            build_pseudo_coords(make_grid_view(np.zeros((2, 2), dtype=bool)), radius=1)

    def test_radius_must_be_positive(self):
        view = make_grid_view([[True, True]])
        with pytest.raises(ValidationError):
            build_pseudo_coords(view, radius=0)


class TestConvForward:
    def test_self_only_identity_weight(self):
        view = make_grid_view([[True]])
        pc = build_pseudo_coords(view, radius=1)
        rng = np.random.default_rng(0)
        mixing = rng.normal(size=(1, 6, 4))
        layer = ConvLayer(
            means=np.zeros((1, 2)),
            raw_precision=np.full((1, 2), softplus_inverse(1.0)),
            mixing=mixing,
            relu=False,
        )
        out = conv_forward(view.signal, pc, layer)
        np.testing.assert_allclose(out, view.signal @ mixing[0], atol=1e-12)

    def test_zero_signal_gives_zero_output(self):
        view = make_grid_view(np.ones((2, 3), dtype=bool))
        pc = build_pseudo_coords(view, radius=1)
        layer = ConvLayer(
            means=np.array([[0.2, -0.4]]),
            raw_precision=np.full((1, 2), 0.5),
            mixing=np.ones((1, 6, 2)),
            relu=False,
        )
        out = conv_forward(np.zeros((view.num_vertices, 6)), pc, layer)
        np.testing.assert_array_equal(out, 0.0)

    def test_two_vertex_hand_evaluation(self):
        # two horizontally adjacent vertices, radius 1: offsets are the
        # normalized (0, +-1) and (0, 0); evaluate the layer by hand
        view = make_grid_view([[True, True]], seed=5)
        pc = build_pseudo_coords(view, radius=1)
        mean = np.array([0.3, -0.2])
        precision = np.array([2.0, 0.7])
        mixing = np.arange(12, dtype=np.float64).reshape(1, 6, 2) / 10.0
        layer = ConvLayer(
            means=mean[None],
            raw_precision=softplus_inverse(precision[0]) * np.ones((1, 2)),
            mixing=mixing,
            relu=False,
        )
        layer.raw_precision = np.array(
            [[softplus_inverse(precision[0]), softplus_inverse(precision[1])]]
        )
        x = view.signal

        def weight(offset):
            d = np.asarray(offset) - mean
            return np.exp(-0.5 * (precision * d * d).sum())

        expected = np.empty((2, 2))
        for v, neighbors in ((0, [(0, (0.0, 0.0)), (1, (0.0, 1.0))]),
                             (1, [(1, (0.0, 0.0)), (0, (0.0, -1.0))])):
            wsum = sum(weight(o) for _, o in neighbors)
            avg = sum(weight(o) * x[y] for y, o in neighbors) / wsum
            expected[v] = avg @ mixing[0]
        out = conv_forward(x, pc, layer)
        np.testing.assert_allclose(out, expected, rtol=1e-12)

    def test_channel_mismatch_is_config_error(self):
        view = make_grid_view([[True, True]])
        pc = build_pseudo_coords(view, radius=1)
        layer = ConvLayer(
            means=np.zeros((1, 2)),
            raw_precision=np.zeros((1, 2)),
            mixing=np.ones((1, 4, 2)),
        )
        with pytest.raises(ConfigError):
            conv_forward(view.signal, pc, layer)


class TestForward:
    def test_zero_final_layer_gives_uniform(self):
        view = make_grid_view(np.ones((3, 3), dtype=bool), seed=2)
        params = small_params(num_classes=4)
        params.dense_layers[-1].weight[:] = 0.0
        params.dense_layers[-1].bias[:] = 0.0
        probs = forward(view, params)
        np.testing.assert_allclose(probs.values, 0.25, atol=1e-12)

    def test_rows_sum_to_one(self):
        view = make_grid_view(np.ones((4, 5), dtype=bool), seed=3)
        for seed in range(5):
            probs = forward(view, small_params(seed=seed))
            np.testing.assert_allclose(probs.values.sum(axis=1), 1.0, atol=1e-9)

    def test_vertex_permutation_permutes_rows(self):
        rng = np.random.default_rng(7)
        mask = rng.random((5, 6)) < 0.6
        view = make_grid_view(mask, seed=4)
        params = small_params(seed=1)
        probs = forward(view, params).values
        # permute vertices: rebuild the view with shuffled vertex order
        perm = rng.permutation(view.num_vertices)
        from viewseg.decompose import View
        from viewseg.mesh import Mesh

        permuted = View(
            mesh=Mesh(view.mesh.vertices[perm], np.zeros((0, 3), dtype=np.int64)),
            signal=view.signal[perm],
            correspondence=view.correspondence[perm],
            grid_pos=view.grid_pos[perm],
            viewpoint=view.viewpoint,
            source_vertex_count=view.source_vertex_count,
        )
        probs_perm = forward(permuted, params).values
        np.testing.assert_allclose(probs_perm, probs[perm], atol=1e-12)

    def test_deterministic(self):
        view = make_grid_view(np.ones((4, 4), dtype=bool), seed=6)
        params = small_params(seed=2)
        a = forward(view, params).values
        b = forward(view, params).values
        np.testing.assert_array_equal(a, b)

    def test_weight_sharing_concatenated_views(self):
        rng = np.random.default_rng(9)
        mask_a = rng.random((4, 4)) < 0.7
        mask_b = rng.random((4, 4)) < 0.7
        mask_a[0, 0] = mask_b[0, 0] = True
        view_a = make_grid_view(mask_a, seed=10)
        view_b = make_grid_view(mask_b, seed=11)
        params = small_params(seed=3, radius=2)
        # concatenate with a column gap wider than the radius so the two
        # vertex sets never interact
        from viewseg.decompose import View
        from viewseg.mesh import Mesh

        gap = mask_a.shape[1] + 2 * params.radius + 3
        grid_b = view_b.grid_pos + np.array([0, gap])
        combined = View(
            mesh=Mesh(
                np.vstack([view_a.mesh.vertices, view_b.mesh.vertices]),
                np.zeros((0, 3), dtype=np.int64),
            ),
            signal=np.vstack([view_a.signal, view_b.signal]),
            correspondence=np.concatenate([view_a.correspondence, view_b.correspondence]),
            grid_pos=np.vstack([view_a.grid_pos, grid_b]),
            viewpoint=view_a.viewpoint,
            source_vertex_count=max(view_a.source_vertex_count, view_b.source_vertex_count),
        )
        together = forward(combined, params).values
        separate = np.vstack([forward(view_a, params).values, forward(view_b, params).values])
        np.testing.assert_allclose(together, separate, atol=1e-12)

    def test_empty_view_rejected(self):
        view = make_grid_view([[True]])
        from viewseg.decompose import View
        from viewseg.mesh import Mesh

        empty = View(
            mesh=Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)),
            signal=np.zeros((0, 6)),
            correspondence=np.zeros(0, dtype=np.int64),
            grid_pos=np.zeros((0, 2), dtype=np.int64),
            viewpoint=view.viewpoint,
            source_vertex_count=1,
        )
        with pytest.raises(ValidationError):
            forward(empty, small_params())


class TestCrossEntropy:
    def test_one_hot_correct_is_zero(self):
        pred = np.eye(4)[[0, 2, 1]]
        assert cross_entropy_loss(pred, np.array([1, 3, 2])) == pytest.approx(0.0, abs=1e-9)

    def test_uniform_ten_classes(self):
        pred = np.full((7, 10), 0.1)
        labels = np.arange(7) % 10 + 1
        assert cross_entropy_loss(pred, labels) == pytest.approx(np.log(10.0))

    def test_half_half_two_classes(self):
        pred = np.full((2, 2), 0.5)
        assert cross_entropy_loss(pred, np.array([1, 2])) == pytest.approx(np.log(2.0))

    def test_mask_subset(self):
        pred = np.array([[1.0, 0.0], [0.5, 0.5]])
        labels = np.array([1, 1])
        full = cross_entropy_loss(pred, labels)
        masked = cross_entropy_loss(pred, labels, mask=np.array([False, True]))
        assert masked == pytest.approx(np.log(2.0))
        assert full == pytest.approx(np.log(2.0) / 2.0)

    def test_empty_mask_rejected(self):
        pred = np.full((3, 2), 0.5)
        with pytest.raises(ValidationError):
            cross_entropy_loss(pred, np.array([1, 1, 1]), mask=np.zeros(3, dtype=bool))

    def test_label_range_checked(self):
        pred = np.full((2, 2), 0.5)
        with pytest.raises(ValidationError):
            cross_entropy_loss(pred, np.array([1, 3]))


class TestBackward:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        mask = rng.random((5, 5)) < 0.8
        mask[0, 0] = True
        view = make_grid_view(mask, seed=13)
        labels = rng.integers(1, 4, size=view.num_vertices)
        worst = 0.0
        for draw in range(3):
            params = small_params(seed=20 + draw)
            loss, grads = backward(view, params, labels)

            def loss_fn(arrays, _params=params):
                return cross_entropy_loss(
                    forward(view, _params.replace_arrays(arrays)), labels
                )

            numeric = finite_difference(loss_fn, params.arrays(), eps=1e-5)
            worst = max(worst, max_relative_error(grads, numeric))
        assert worst <= 1e-4

    def test_confident_correct_prediction_has_tiny_gradient(self):
        view = make_grid_view(np.ones((3, 3), dtype=bool), seed=14)
        params = small_params(seed=5, num_classes=3)
        params.dense_layers[-1].weight[:] = 0.0
        params.dense_layers[-1].bias[:] = np.array([50.0, 0.0, 0.0])
        labels = np.ones(view.num_vertices, dtype=np.int64)
        loss, grads = backward(view, params, labels)
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        assert norm < 1e-8

    def test_duplicated_vertex_doubles_summed_gradient(self):
        # isolated vertices so the patch operator sees each alone; the
        # pre-mean (summed) gradient must be additive per vertex
        mask = np.zeros((1, 9), dtype=bool)
        mask[0, [0, 4, 8]] = True
        view = make_grid_view(mask, seed=15)
        params = small_params(seed=6, radius=1)
        labels = np.array([1, 2, 3], dtype=np.int64)

        def summed(view_, labels_):
            n = view_.num_vertices
            _, grads = backward(view_, params, labels_)
            return {k: g * n for k, g in grads.items()}

        base = summed(view, labels)
        # duplicate vertex 0 far away on the grid with identical signal
        from viewseg.decompose import View
        from viewseg.mesh import Mesh

        mask2 = np.zeros((5, 9), dtype=bool)
        extended = View(
            mesh=Mesh(
                np.vstack([view.mesh.vertices, view.mesh.vertices[0:1]]),
                np.zeros((0, 3), dtype=np.int64),
            ),
            signal=np.vstack([view.signal, view.signal[0:1]]),
            correspondence=np.concatenate([view.correspondence, view.correspondence[0:1]]),
            grid_pos=np.vstack([view.grid_pos, [[4, 4]]]),
            viewpoint=view.viewpoint,
            source_vertex_count=view.source_vertex_count,
        )
        doubled = summed(extended, np.append(labels, 1))
        single = summed(
            View(
                mesh=Mesh(view.mesh.vertices[0:1], np.zeros((0, 3), dtype=np.int64)),
                signal=view.signal[0:1],
                correspondence=view.correspondence[0:1],
                grid_pos=np.array([[0, 0]]),
                viewpoint=view.viewpoint,
                source_vertex_count=view.source_vertex_count,
            ),
            labels[0:1],
        )
        for key in base:
            np.testing.assert_allclose(
                doubled[key], base[key] + single[key], rtol=1e-9, atol=1e-12
            )

    def test_probability_grad_route_matches_loss_route(self):
        rng = np.random.default_rng(16)
        view = make_grid_view(np.ones((3, 4), dtype=bool), seed=17)
        params = small_params(seed=7)
        labels = rng.integers(1, 4, size=view.num_vertices)
        loss, grads = backward(view, params, labels)
        probs = forward(view, params).values
        n = view.num_vertices
        d_probs = np.zeros_like(probs)
        d_probs[np.arange(n), labels - 1] = -1.0 / (probs[np.arange(n), labels - 1] * n)
        grads2 = backward_from_probability_grad(view, params, d_probs)
        for key in grads:
            np.testing.assert_allclose(grads[key], grads2[key], rtol=1e-9, atol=1e-12)


class TestAdam:
    def test_first_step_magnitude(self):
        arrays = {"p": np.zeros(1)}
        grads = {"p": np.ones(1)}
        state = init_adam_state(arrays)
        new, state = adam_step(arrays, grads, state, lr=0.001)
        assert new["p"][0] == pytest.approx(-0.001, rel=1e-6)
        assert state.step == 1

    def test_zero_gradients_do_nothing(self):
        arrays = {"p": np.array([1.5, -2.0])}
        state = init_adam_state(arrays)
        current = arrays
        for _ in range(5):
            current, state = adam_step(current, {"p": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_array_equal(current["p"], arrays["p"])

    def test_deterministic(self):
        arrays = {"p": np.array([0.3])}
        grads = {"p": np.array([0.7])}
        a, _ = adam_step(arrays, grads, init_adam_state(arrays), lr=0.01)
        b, _ = adam_step(arrays, grads, init_adam_state(arrays), lr=0.01)
        np.testing.assert_array_equal(a["p"], b["p"])

    def test_nonfinite_gradient_names_block(self):
        arrays = {"good": np.zeros(2), "conv0.means": np.zeros(2)}
        grads = {"good": np.zeros(2), "conv0.means": np.array([np.nan, 0.0])}
        with pytest.raises(NumericsError) as err:
            adam_step(arrays, grads, init_adam_state(arrays))
        assert "conv0.means" in str(err.value)

    def test_mismatched_blocks_rejected(self):
        arrays = {"a": np.zeros(1)}
        with pytest.raises(ConfigError):
            adam_step(arrays, {"b": np.zeros(1)}, init_adam_state(arrays))


class TestParameterCount:
    def test_dense_only(self):
        params = ClassifierParams(
            conv_layers=[],
            dense_layers=[DenseLayer(weight=np.zeros((6, 10)), bias=np.zeros(10), relu=False)],
        )
        assert parameter_count(params) == 70

    def test_single_conv_layer(self):
        params = ClassifierParams(
            conv_layers=[
                ConvLayer(
                    means=np.zeros((8, 2)),
                    raw_precision=np.zeros((8, 2)),
                    mixing=np.zeros((8, 6, 16)),
                )
            ],
            dense_layers=[],
        )
        assert parameter_count(params) == 800

    def test_default_architecture_budget(self):
        count = parameter_count(init_params(10))
        assert count == 14538
        assert 10_000 <= count <= 20_000

    def test_architecture_round_trip(self):
        params = init_params(7, seed=3)
        rebuilt = from_architecture(params.architecture(), seed=3)
        assert rebuilt.architecture() == params.architecture()
        assert parameter_count(rebuilt) == parameter_count(params)


class TestTrainingBehavior:
    def test_loss_decreases_on_separable_toy(self):
        rng = np.random.default_rng(21)
        view = make_grid_view(np.ones((4, 8), dtype=bool), seed=22)
        # two linearly separable position clusters
        signal = view.signal.copy()
        labels = np.where(view.grid_pos[:, 1] < 4, 1, 2).astype(np.int64)
        signal[:, 0] = np.where(labels == 1, -1.0, 1.0) + 0.05 * rng.normal(size=len(labels))
        from viewseg.decompose import View
        from viewseg.mesh import Mesh

        toy = View(
            mesh=Mesh(signal[:, :3], np.zeros((0, 3), dtype=np.int64)),
            signal=np.hstack([signal[:, :3], view.signal[:, 3:]]),
            correspondence=view.correspondence,
            grid_pos=view.grid_pos,
            viewpoint=view.viewpoint,
            source_vertex_count=view.source_vertex_count,
        )
        params = small_params(seed=8, num_classes=2)
        arrays = params.arrays()
        state = init_adam_state(arrays)
        losses = []
        for _ in range(50):
            current = params.replace_arrays(arrays)
            loss, grads = backward(toy, current, labels)
            losses.append(loss)
            arrays, state = adam_step(arrays, grads, state, lr=0.001)
        assert losses[-1] < losses[0] - 1e-3

    def test_too_few_classes_rejected(self):
        with pytest.raises(ConfigError):
            init_params(1)
