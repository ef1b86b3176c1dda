"""Capsule network: routing against the straight-line reference, closed-form
prediction/loss values, noise semantics, parameter budget, gradients."""

import numpy as np
import pytest

from forgecaps import capsnet
from forgecaps.capsnet import (
    CapsuleHeadSpec,
    CapsuleModel,
    Prediction,
    PrimaryCapsule,
    RoutingConfig,
    loss,
    predict,
    route,
    stats_pool,
)
from forgecaps.extractor import ToyExtractor
from forgecaps.tensor import Tensor

from routing_reference import routing_reference

TINY_HEAD = CapsuleHeadSpec(conv_channels=(3, 11), pooled_channels=4)


def tiny_model(seed=0, sigma=0.0, channels=4, dtype=np.float64):
    rng = np.random.default_rng(seed)
    extractor = ToyExtractor(channels=channels, rng=rng, dtype=dtype)
    return CapsuleModel(
        extractor,
        routing=RoutingConfig(iterations=2, noise_sigma=sigma),
        head=TINY_HEAD,
        rng=rng,
        dtype=dtype,
    )


class TestStatsPool:
    def test_constant_channel(self):
        out = stats_pool(Tensor(np.full((1, 3, 4), 2.5)))
        np.testing.assert_allclose(out.data, [[2.5], [0.0]], atol=1e-12)

    def test_hand_mean_and_population_variance(self):
        out = stats_pool(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])))
        np.testing.assert_allclose(out.data, [[2.5], [1.25]], atol=1e-12)

    def test_spatial_permutation_invariance(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 4, 5))
        flat = x.reshape(2, 20)
        perm = flat[:, rng.permutation(20)].reshape(2, 4, 5)
        np.testing.assert_allclose(
            stats_pool(Tensor(x)).data, stats_pool(Tensor(perm)).data, atol=1e-12)

    def test_batched_shape(self):
        out = stats_pool(Tensor(np.zeros((5, 7, 2, 2))))
        assert out.data.shape == (5, 2, 7)


class TestRoute:
    def test_single_capsule_identity_weights(self):
        # squash((1,0)) = (0.5,0); c = 1/2; s = (0.25,0); squash again = (1/17, 0)
        u = Tensor(np.array([[1.0, 0.0]]))
        w = Tensor(np.stack([np.eye(2), np.eye(2)])[None])
        cfg = RoutingConfig(iterations=1, noise_sigma=0.0)
        v, _ = route(u, w, cfg)
        np.testing.assert_allclose(v.data[0], [1.0 / 17.0, 0.0], atol=1e-6)
        np.testing.assert_allclose(v.data[1], [1.0 / 17.0, 0.0], atol=1e-6)

    def test_first_iteration_couplings_uniform(self):
        rng = np.random.default_rng(1)
        u = Tensor(rng.normal(size=(3, 4)))
        w = Tensor(rng.normal(size=(3, 2, 4, 4)))
        _, state = route(u, w, RoutingConfig(iterations=1, noise_sigma=0.0))
        np.testing.assert_allclose(state.coupling_history[0], 0.5, atol=1e-15)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_straight_line_reference(self, seed):
        rng = np.random.default_rng(seed)
        num_in = rng.choice([1, 2, 3, 5])
        num_out = rng.choice([2, 3])
        iters = rng.choice([1, 2, 3])
        n = rng.choice([2, 4])
        m = rng.choice([2, 4])
        u = rng.normal(size=(num_in, n))
        w = rng.normal(size=(num_in, num_out, m, n))
        v, _ = route(Tensor(u), Tensor(w), RoutingConfig(iterations=int(iters), noise_sigma=0.0))
        expected = routing_reference(u, w, int(iters))
        assert np.max(np.abs(v.data - expected)) < 1e-12

    @pytest.mark.parametrize("seed", range(10))
    def test_couplings_sum_to_one_every_iteration(self, seed):
        rng = np.random.default_rng(seed)
        num_in = rng.choice([1, 2, 3, 5])
        num_out = rng.choice([2, 3])
        u = rng.normal(size=(num_in, 4))
        w = rng.normal(size=(num_in, num_out, 4, 4))
        _, state = route(Tensor(u), Tensor(w), RoutingConfig(iterations=3, noise_sigma=0.0))
        assert len(state.coupling_history) == 3
        for c in state.coupling_history:
            np.testing.assert_allclose(c.sum(axis=-1), 1.0, atol=1e-12)

    def test_output_norm_below_one(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            u = Tensor(rng.normal(size=(3, 4)) * rng.uniform(0.1, 20))
            w = Tensor(rng.normal(size=(3, 2, 4, 4)))
            v, _ = route(u, w, RoutingConfig(iterations=2, noise_sigma=0.0))
            assert np.all(np.linalg.norm(v.data, axis=-1) < 1.0)

    def test_noise_leaves_weights_untouched_and_eval_deterministic(self):
        rng = np.random.default_rng(4)
        u = Tensor(rng.normal(size=(3, 4)))
        w = Tensor(rng.normal(size=(3, 2, 4, 4)))
        snapshot = w.data.copy()
        cfg = RoutingConfig(iterations=2, noise_sigma=0.01, mode="train")
        v1, _ = route(u, w, cfg, rng=np.random.default_rng(100))
        v2, _ = route(u, w, cfg, rng=np.random.default_rng(101))
        np.testing.assert_array_equal(w.data, snapshot)
        assert np.any(v1.data != v2.data)
        ev = RoutingConfig(iterations=2, noise_sigma=0.01, mode="eval")
        e1, _ = route(u, w, ev)
        e2, _ = route(u, w, ev)
        np.testing.assert_array_equal(e1.data, e2.data)

    def test_train_noise_requires_rng(self):
        u = Tensor(np.zeros((1, 2)))
        w = Tensor(np.zeros((1, 2, 2, 2)))
        with pytest.raises(ValueError, match="requires an rng"):
            route(u, w, RoutingConfig(iterations=1, noise_sigma=0.01, mode="train"))

    def test_invalid_iterations_rejected(self):
        with pytest.raises(ValueError, match="at least one iteration"):
            RoutingConfig(iterations=0)

    def test_dimension_mismatch_rejected(self):
        u = Tensor(np.zeros((2, 3)))
        w = Tensor(np.zeros((2, 2, 4, 4)))
        with pytest.raises(ValueError, match="does not match"):
            route(u, w, RoutingConfig(iterations=1, noise_sigma=0.0))

    def test_shared_transform_mode(self):
        rng = np.random.default_rng(5)
        u = rng.normal(size=(3, 4))
        w_shared = rng.normal(size=(3, 1, 4, 4))
        cfg = RoutingConfig(iterations=2, noise_sigma=0.0, shared_transform=True)
        v, _ = route(Tensor(u), Tensor(w_shared), cfg, num_out=2)
        # sharing one matrix per input capsule equals tiling it over j
        tiled = np.repeat(w_shared, 2, axis=1)
        expected = routing_reference(u, tiled, 2)
        np.testing.assert_allclose(v.data, expected, atol=1e-12)


class TestPredict:
    def test_equal_capsules_give_half(self):
        rng = np.random.default_rng(0)
        v = rng.normal(size=4)
        pred = predict(Tensor(v), Tensor(v.copy()))
        assert pred.y_hat.item() == pytest.approx(0.5, abs=1e-12)

    def test_hand_column_softmax(self):
        pred = predict(Tensor(np.array([1.0, 1.0])), Tensor(np.array([0.0, 0.0])))
        assert pred.y_hat.item() == pytest.approx(1.0 / (1.0 + np.e), abs=1e-6)
        assert pred.m == 2

    @pytest.mark.parametrize("seed", range(10))
    def test_classes_sum_to_one_and_swap_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(2, 5))
        fwd = predict(Tensor(a), Tensor(b))
        total = fwd.per_class.data[0] + fwd.per_class.data[1]
        assert total == pytest.approx(1.0, abs=1e-12)
        swapped = predict(Tensor(b), Tensor(a))
        assert swapped.y_hat.item() == pytest.approx(1.0 - fwd.y_hat.item(), abs=1e-15)

    def test_empty_capsule_rejected(self):
        with pytest.raises(ValueError, match="at least one dimension"):
            predict(Tensor(np.zeros((0,))), Tensor(np.zeros((0,))))


class TestLoss:
    def test_half_probability_gives_log_two(self):
        assert loss(1, 0.5).item() == pytest.approx(np.log(2.0), abs=1e-12)
        assert loss(0, 0.5).item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_hand_value(self):
        assert loss(1, 0.9).item() == pytest.approx(-np.log(0.9), abs=1e-9)

    def test_clamping_keeps_loss_finite(self):
        assert np.isfinite(loss(1, 0.0).item())
        assert np.isfinite(loss(0, 1.0).item())

    def test_invalid_label_rejected(self):
        with pytest.raises(ValueError, match="labels must be 0"):
            loss(2, 0.5)


class TestParameterBudget:
    def test_primary_capsule_default_head(self):
        cap = PrimaryCapsule(256, CapsuleHeadSpec(), np.random.default_rng(0))
        assert cap.parameter_count == 157_043

    def test_default_head_capsule_dim(self):
        assert CapsuleHeadSpec().capsule_dim() == 4

    def test_trainable_total_with_default_head(self):
        rng = np.random.default_rng(0)
        extractor = ToyExtractor(channels=256, rng=rng)
        model = CapsuleModel(extractor, rng=rng)
        budget = model.parameter_budget()
        assert budget.trainable == 3 * 157_043 + 96


class TestModelForward:
    def test_eval_forward_bit_identical(self):
        model = tiny_model(seed=1)
        features = model.extractor.extract(
            Tensor(np.random.default_rng(2).normal(size=(3, 128, 128))))
        a = model.forward(features).y_hat.item()
        b = model.forward(features).y_hat.item()
        assert a == b

    def test_probability_in_unit_interval(self):
        model = tiny_model(seed=3)
        rng = np.random.default_rng(4)
        for _ in range(25):
            features = Tensor(rng.normal(size=(4, 16, 16)))
            y = model.forward(features).y_hat.item()
            assert 0.0 <= y <= 1.0

    def test_forward_state_exposes_internals(self):
        model = tiny_model(seed=5)
        features = Tensor(np.random.default_rng(6).normal(size=(4, 16, 16)))
        pred, state = model.forward(features, return_state=True)
        assert state.capsule_outputs.shape == (3, TINY_HEAD.capsule_dim())
        assert state.routing.outputs.shape == (2, TINY_HEAD.capsule_dim())
        assert isinstance(pred, Prediction)

    def test_train_mode_noise_resampled_per_forward(self):
        model = tiny_model(seed=7, sigma=0.01)
        features = Tensor(np.random.default_rng(8).normal(size=(2, 4, 16, 16)))
        rng = np.random.default_rng(9)
        a = model.forward(features, train=True, rng=rng).y_hat.data.copy()
        b = model.forward(features, train=True, rng=rng).y_hat.data.copy()
        assert np.any(a != b)

    def test_concurrent_scoring_agrees_and_keeps_grads_enabled(self):
        from concurrent.futures import ThreadPoolExecutor

        model = tiny_model(seed=21)
        image = Tensor(np.random.default_rng(22).normal(size=(3, 128, 128)))

        def score(_):
            features = model.extractor.extract(image)  # uses no_grad internally
            return model.forward(features).y_hat.item()

        expected = score(0)
        with ThreadPoolExecutor(max_workers=4) as pool:
            results = list(pool.map(score, range(16)))
        assert all(r == expected for r in results)
        # this thread's graph recording must be unaffected by the workers
        leaf = Tensor(np.array(1.0), requires_grad=True)
        assert (leaf * 2.0).requires_grad


class TestEndToEndGradients:
    def test_full_loss_matches_finite_differences(self):
        from forgecaps.gradcheck import end_to_end_error

        assert end_to_end_error(seed=11) < 1e-4


class TestCheckpoint:
    def test_round_trip_preserves_predictions(self, tmp_path):
        model = tiny_model(seed=13, dtype=np.float32)
        features = Tensor(
            np.random.default_rng(14).normal(size=(4, 16, 16)).astype(np.float32))
        before = model.forward(features).y_hat.item()
        path = tmp_path / "model.wa"
        capsnet.save_checkpoint(path, model)
        restored = capsnet.load_checkpoint(path, dtype=np.float32)
        after = restored.forward(features).y_hat.item()
        assert before == after

    def test_round_trip_preserves_parameters_exactly(self, tmp_path):
        model = tiny_model(seed=15, dtype=np.float32)
        path = tmp_path / "model.wa"
        capsnet.save_checkpoint(path, model)
        restored = capsnet.load_checkpoint(path, dtype=np.float32)
        for (name, p), (rname, rp) in zip(
                model.trainable_parameters(), restored.trainable_parameters()):
            assert name == rname
            np.testing.assert_array_equal(p.data, rp.data)

    def test_meta_records_config(self, tmp_path):
        from forgecaps.archive import load_archive

        model = tiny_model(seed=16, sigma=0.02)
        path = tmp_path / "model.wa"
        capsnet.save_checkpoint(path, model)
        meta = load_archive(path).meta
        assert meta["routing.iterations"] == "2"
        assert float(meta["routing.noise_sigma"]) == 0.02
        assert meta["class_convention"] == capsnet.CLASS_CONVENTION
        assert meta["extractor.kind"] == "toy"
