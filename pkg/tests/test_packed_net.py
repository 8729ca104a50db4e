"""Packed network: plans, init, forward, gradients, counts, serialization.

The checks run against independent oracles from helpers.py: a from-scratch
dense MLP, materialized block-diagonal matrices, and central finite
differences of the loss value.
"""

import numpy as np
import pytest
from helpers import (
    block_diagonal_matrix,
    dense_forward,
    dense_loss_and_grads,
    fd_gradients,
    nudge_biases_off_kinks,
    relative_error,
)

from packedflow.packed_net import (
    LayerPlan,
    PackedSpec,
    Params,
    ShapeMismatchError,
    forward,
    init_params,
    load_params,
    loss_and_grad,
    make_dropout_masks,
    param_count,
    plan_layers,
    save_params,
)

DEEP_THIN = (64, 64, 8, 64, 64, 64, 8, 64, 64)


def random_case(spec, seed, batch=6):
    plans = plan_layers(spec)
    params = init_params(plans, seed)
    rng = np.random.default_rng(seed + 1000)
    x = rng.normal(size=(batch, spec.in_features))
    y = rng.normal(size=(batch, spec.out_features))
    return plans, params, x, y


class TestSpecValidation:
    def test_rejects_bad_counts(self):
        with pytest.raises(ValueError):
            PackedSpec(0, 1, 1, (8,))
        with pytest.raises(ValueError):
            PackedSpec(1, 1, 1, ())
        with pytest.raises(ValueError):
            PackedSpec(1, 1, 1, (8, 0))

    def test_dropout_probability_pinned(self):
        PackedSpec(1, 1, 1, (8,), dropout_enabled=True, dropout_p=0.2)
        with pytest.raises(ValueError):
            PackedSpec(1, 1, 1, (8,), dropout_enabled=True, dropout_p=0.5)


class TestPlanLayers:
    def test_deep_thin_architecture(self):
        spec = PackedSpec(8, 4, 1, DEEP_THIN)
        plans = plan_layers(spec)
        first, last = plans[0], plans[-1]
        assert (first.groups, first.per_group_in, first.out_width) == (8, 7, 256)
        # the width-8 layers widen to 32
        assert [p.out_width for p in plans[:-1]] == [256, 256, 32, 256, 256, 256, 32, 256, 256]
        assert (last.in_width, last.out_width, last.per_group_out) == (256, 32, 4)

    def test_identity_configuration(self):
        plans = plan_layers(PackedSpec(1, 1, 1, (48, 128, 48)))
        assert [(p.in_width, p.out_width) for p in plans] == [(7, 48), (48, 128), (128, 48), (48, 4)]
        assert all(p.groups == 1 for p in plans)

    def test_width_rounding(self):
        # alpha*10 = 20, groups step 8 -> next multiple is 24
        plans = plan_layers(PackedSpec(4, 2, 2, (10,)))
        assert plans[0].out_width == 24

    def test_minimum_width_is_group_count(self):
        plans = plan_layers(PackedSpec(4, 1, 2, (1, 2)))
        assert all(p.out_width >= 8 for p in plans[:-1])

    @pytest.mark.parametrize("m,alpha,gamma", [(2, 1, 1), (3, 2, 2), (8, 4, 3), (5, 5, 1)])
    def test_roles_and_divisibility(self, m, alpha, gamma):
        spec = PackedSpec(m, alpha, gamma, (9, 17, 5))
        plans = plan_layers(spec)
        assert plans[0].role == "first" and plans[-1].role == "last"
        assert plans[0].groups == m and plans[-1].groups == m
        assert plans[0].per_group_in == spec.in_features
        assert plans[-1].per_group_out == spec.out_features
        for plan in plans[1:-1]:
            assert plan.role == "hidden"
            assert plan.groups == m * gamma
        for plan in plans:
            assert plan.in_width == plan.groups * plan.per_group_in
            assert plan.out_width == plan.groups * plan.per_group_out


class TestInitParams:
    def test_biases_zero(self):
        plans = plan_layers(PackedSpec(4, 2, 2, (16, 16)))
        params = init_params(plans, 123)
        for b in params.biases:
            assert np.all(b == 0.0)

    def test_uniform_bound_from_group_fan_in(self):
        # per_group_in = 12 -> every weight within sqrt(6/12)
        spec = PackedSpec(4, 2, 2, (48, 128))
        plans = plan_layers(spec)
        assert plans[1].per_group_in == 12
        params = init_params(plans, 7)
        bound = np.sqrt(0.5)
        assert np.abs(params.weights[1]).max() <= bound
        assert np.abs(params.weights[1]).max() > 0.9 * bound  # distribution fills the range

    def test_deterministic_per_seed(self):
        plans = plan_layers(PackedSpec(2, 2, 1, (8, 8)))
        a = init_params(plans, 5)
        b = init_params(plans, 5)
        c = init_params(plans, 6)
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)
        assert any(not np.array_equal(wa, wc) for wa, wc in zip(a.weights, c.weights))


class TestParamCount:
    def test_single_hidden_dense(self):
        assert param_count(plan_layers(PackedSpec(1, 1, 1, (48,)))) == 580

    def test_grouped_hidden_layer_example(self):
        # 48 -> 128 widened to 96 -> 256 with 8 groups: 8*32*12 + 256 = 3328
        plans = plan_layers(PackedSpec(4, 2, 2, (48, 128)))
        hidden = plans[1]
        assert (hidden.in_width, hidden.out_width, hidden.groups) == (96, 256, 8)
        count = hidden.groups * hidden.per_group_out * hidden.per_group_in + hidden.out_width
        assert count == 3328

    @pytest.mark.parametrize("m", [2, 4, 8])
    def test_deep_ensemble_count_identity(self, m):
        base = (48, 128, 48)
        dense = param_count(plan_layers(PackedSpec(1, 1, 1, base)))
        packed = param_count(plan_layers(PackedSpec(m, m, 1, base)))
        assert packed == m * dense

    def test_count_matches_materialized_blocks(self):
        spec = PackedSpec(3, 2, 2, (10, 14))
        plans = plan_layers(spec)
        params = init_params(plans, 11)
        nonzero = 0
        for plan, w in zip(plans, params.weights):
            dense = block_diagonal_matrix(plan, np.ones_like(w))
            nonzero += int(dense.sum()) + plan.out_width
        assert param_count(plans) == nonzero


class TestForward:
    def test_zero_params_zero_output(self):
        plans = plan_layers(PackedSpec(3, 2, 2, (8, 8)))
        params = init_params(plans, 0).zeros_like()
        x = np.random.default_rng(0).normal(size=(5, 7))
        out = forward(params, plans, x)
        assert np.all(out.estimator_outputs == 0.0)
        assert np.all(out.mean_output == 0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_identity_configuration_matches_dense_reference(self, seed):
        spec = PackedSpec(1, 1, 1, (12, 9), in_features=5, out_features=3)
        plans, params, x, _ = random_case(spec, seed)
        dense = dense_forward([w[0] for w in params.weights], params.biases, x)
        out = forward(params, plans, x)
        np.testing.assert_allclose(out.mean_output, dense, rtol=0, atol=1e-12)
        np.testing.assert_allclose(out.estimator_outputs[0], dense, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("m,alpha,gamma", [(2, 1, 1), (4, 2, 2), (8, 4, 1), (3, 3, 3)])
    def test_layers_match_block_diagonal_matrices(self, m, alpha, gamma):
        spec = PackedSpec(m, alpha, gamma, (11, 6))
        plans, params, x, _ = random_case(spec, 42)
        a = np.tile(x, (1, m))
        for i, plan in enumerate(plans):
            dense = block_diagonal_matrix(plan, params.weights[i])
            z = a @ dense.T + params.biases[i]
            a = np.maximum(z, 0.0) if i < len(plans) - 1 else z
        out = forward(params, plans, x)
        flat_mean = a.reshape(len(x), m, spec.out_features).mean(axis=1)
        np.testing.assert_allclose(out.mean_output, flat_mean, rtol=0, atol=1e-12)

    def test_mean_is_exact_estimator_average(self):
        spec = PackedSpec(8, 4, 2, (16, 16))
        plans, params, x, _ = random_case(spec, 3, batch=9)
        out = forward(params, plans, x)
        manual = out.estimator_outputs.sum(axis=0) / spec.num_estimators
        np.testing.assert_allclose(out.mean_output, manual, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("gamma", [1, 2])
    def test_estimator_independence(self, gamma):
        spec = PackedSpec(4, 2, gamma, (8, 12, 8))
        plans, params, x, _ = random_case(spec, 17)
        baseline = forward(params, plans, x).estimator_outputs
        target = 2
        perturbed = params.copy()
        rng = np.random.default_rng(99)
        for i, plan in enumerate(plans):
            groups_per_estimator = plan.groups // spec.num_estimators
            gsl = slice(target * groups_per_estimator, (target + 1) * groups_per_estimator)
            width_per_estimator = plan.out_width // spec.num_estimators
            bsl = slice(target * width_per_estimator, (target + 1) * width_per_estimator)
            perturbed.weights[i][gsl] += rng.normal(size=perturbed.weights[i][gsl].shape)
            perturbed.biases[i][bsl] += rng.normal(size=perturbed.biases[i][bsl].shape)
        changed = forward(perturbed, plans, x).estimator_outputs
        for j in range(spec.num_estimators):
            if j == target:
                assert not np.array_equal(changed[j], baseline[j])
            else:
                assert np.array_equal(changed[j], baseline[j])

    def test_eval_mode_is_pure(self):
        spec = PackedSpec(2, 2, 1, (8,), dropout_enabled=True)
        plans, params, x, _ = random_case(spec, 5)
        a = forward(params, plans, x, mode="eval")
        b = forward(params, plans, x, mode="eval")
        assert np.array_equal(a.mean_output, b.mean_output)
        assert np.array_equal(a.estimator_outputs, b.estimator_outputs)

    def test_shape_error_names_layer(self):
        spec = PackedSpec(2, 1, 1, (8, 8))
        plans, params, x, _ = random_case(spec, 0)
        params.weights[1] = params.weights[1][:, :, :-1]
        with pytest.raises(ShapeMismatchError) as err:
            forward(params, plans, x)
        assert err.value.layer == 1
        assert "layer 1" in str(err.value)

    def test_rejects_non_finite_batch(self):
        spec = PackedSpec(2, 1, 1, (8,))
        plans, params, x, _ = random_case(spec, 0)
        x[0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            forward(params, plans, x)


class TestDropout:
    def test_mask_values_are_inverted_scale(self):
        plans = plan_layers(PackedSpec(2, 2, 1, (16, 16)))
        masks = make_dropout_masks(plans, 64, 0.2, np.random.default_rng(0))
        assert len(masks) == len(plans) - 1
        for mask in masks:
            values = np.unique(mask)
            assert set(values.tolist()) <= {0.0, 1.0 / 0.8}

    def test_explicit_masks_reproduce_manual_computation(self):
        spec = PackedSpec(2, 1, 1, (6,), in_features=3, out_features=2)
        plans, params, x, _ = random_case(spec, 8)
        masks = make_dropout_masks(plans, len(x), 0.2, np.random.default_rng(4))
        out = forward(params, plans, x, mode="train", dropout_masks=masks)
        a = np.tile(x, (1, 2))
        dense0 = block_diagonal_matrix(plans[0], params.weights[0])
        a = np.maximum(a @ dense0.T + params.biases[0], 0.0) * masks[0]
        dense1 = block_diagonal_matrix(plans[1], params.weights[1])
        z = a @ dense1.T + params.biases[1]
        np.testing.assert_allclose(
            out.mean_output, z.reshape(len(x), 2, 2).mean(axis=1), rtol=0, atol=1e-12
        )

    def test_train_mode_without_rng_or_masks_fails(self):
        spec = PackedSpec(2, 1, 1, (6,))
        plans, params, x, _ = random_case(spec, 8)
        with pytest.raises(ValueError, match="rng"):
            forward(params, plans, x, mode="train", dropout_p=0.2)

    def test_eval_never_applies_dropout(self):
        spec = PackedSpec(2, 1, 1, (6,))
        plans, params, x, _ = random_case(spec, 8)
        plain = forward(params, plans, x, mode="eval")
        with_p = forward(params, plans, x, mode="eval", dropout_p=0.2, rng=np.random.default_rng(0))
        assert np.array_equal(plain.mean_output, with_p.mean_output)


class TestLossAndGrad:
    def test_loss_zero_at_targets(self):
        spec = PackedSpec(4, 2, 2, (8, 8))
        plans, params, x, _ = random_case(spec, 21)
        targets = forward(params, plans, x).mean_output
        loss, grads = loss_and_grad(params, plans, x, targets)
        assert loss == 0.0
        for g in grads.weights + grads.biases:
            assert np.all(g == 0.0)

    def test_single_linear_layer_closed_form(self):
        # one affine layer, one sample: dL/dW = 2 (Wx + b - t) x^T / out_features
        plan = [LayerPlan("last", 5, 3, 1, 5, 3)]
        rng = np.random.default_rng(2)
        params = Params([rng.normal(size=(1, 3, 5))], [rng.normal(size=3)])
        x = rng.normal(size=(1, 5))
        t = rng.normal(size=(1, 3))
        _, grads = loss_and_grad(params, plan, x, t)
        residual = x @ params.weights[0][0].T + params.biases[0] - t
        expected = 2.0 * residual.T @ x / 3.0
        np.testing.assert_allclose(grads.weights[0][0], expected, rtol=0, atol=1e-14)
        np.testing.assert_allclose(grads.biases[0], 2.0 * residual[0] / 3.0, rtol=0, atol=1e-14)

    @pytest.mark.parametrize("seed", range(3))
    def test_identity_configuration_grads_match_dense_reference(self, seed):
        spec = PackedSpec(1, 1, 1, (10, 7), in_features=4, out_features=3)
        plans, params, x, y = random_case(spec, seed)
        loss, grads = loss_and_grad(params, plans, x, y)
        ref_loss, ref_w, ref_b = dense_loss_and_grads(
            [w[0] for w in params.weights], params.biases, x, y
        )
        assert abs(loss - ref_loss) <= 1e-12
        for i in range(len(plans)):
            np.testing.assert_allclose(grads.weights[i][0], ref_w[i], rtol=0, atol=1e-12)
            np.testing.assert_allclose(grads.biases[i], ref_b[i], rtol=0, atol=1e-12)

    @pytest.mark.parametrize("dropout", [False, True])
    def test_finite_difference_agreement_small_net(self, dropout):
        spec = PackedSpec(4, 2, 2, (6, 8, 6), in_features=5, out_features=3)
        plans, params, x, y = random_case(spec, 1)
        masks = (
            make_dropout_masks(plans, len(x), 0.2, np.random.default_rng(12)) if dropout else None
        )
        nudge_biases_off_kinks(params, plans, x, masks)
        _, grads = loss_and_grad(params, plans, x, y, mode="train", dropout_masks=masks)
        fd_w, fd_b = fd_gradients(params, plans, x, y, masks)
        for i in range(len(plans)):
            assert relative_error(grads.weights[i], fd_w[i]).max() < 1e-4
            assert relative_error(grads.biases[i], fd_b[i]).max() < 1e-4

    def test_empty_batch_rejected(self):
        spec = PackedSpec(2, 1, 1, (6,))
        plans = plan_layers(spec)
        params = init_params(plans, 0)
        with pytest.raises(ValueError, match="empty"):
            loss_and_grad(params, plans, np.empty((0, 7)), np.empty((0, 4)))

    def test_target_shape_mismatch_rejected(self):
        spec = PackedSpec(2, 1, 1, (6,))
        plans, params, x, _ = random_case(spec, 0)
        with pytest.raises(ShapeMismatchError):
            loss_and_grad(params, plans, x, np.zeros((len(x), 3)))


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        spec = PackedSpec(4, 3, 2, (10, 20), dropout_enabled=True)
        plans = plan_layers(spec)
        params = init_params(plans, 77)
        path = tmp_path / "model.pkmlp"
        save_params(path, spec, params)
        loaded_spec, loaded_plans, loaded = load_params(path)
        assert loaded_spec == spec
        assert loaded_plans == plans
        for a, b in zip(params.weights + params.biases, loaded.weights + loaded.biases):
            assert np.array_equal(a, b) and a.dtype == b.dtype

    def test_round_trip_eval_equivalent(self, tmp_path):
        spec = PackedSpec(3, 2, 1, (12,))
        plans, params, x, _ = random_case(spec, 9)
        path = tmp_path / "model.pkmlp"
        save_params(path, spec, params)
        _, loaded_plans, loaded = load_params(path)
        before = forward(params, plans, x).mean_output
        after = forward(loaded, loaded_plans, x).mean_output
        assert np.array_equal(before, after)

    def test_rejects_corrupt_files(self, tmp_path):
        spec = PackedSpec(2, 1, 1, (6,))
        params = init_params(plan_layers(spec), 0)
        path = tmp_path / "model.pkmlp"
        save_params(path, spec, params)
        blob = path.read_bytes()
        (tmp_path / "bad_magic.pkmlp").write_bytes(b"XXXXXXXX" + blob[8:])
        with pytest.raises(ValueError, match="magic"):
            load_params(tmp_path / "bad_magic.pkmlp")
        (tmp_path / "trailing.pkmlp").write_bytes(blob + b"\x00" * 8)
        with pytest.raises(ValueError, match="trailing"):
            load_params(tmp_path / "trailing.pkmlp")

    def test_rejects_non_finite_params(self, tmp_path):
        spec = PackedSpec(2, 1, 1, (6,))
        params = init_params(plan_layers(spec), 0)
        params.weights[0][0, 0, 0] = np.inf
        with pytest.raises(ValueError, match="non-finite"):
            save_params(tmp_path / "model.pkmlp", spec, params)
