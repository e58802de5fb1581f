"""CNN engine: shape contracts, finite-difference gradient oracle, Adam, training."""

import numpy as np
import numpy.testing as npt
import pytest

from deepsense.errors import DimensionError, DivergedTrainingError, ShapeError
from deepsense.network import (
    AdamState,
    NetworkSpec,
    NetworkWeights,
    TrainConfig,
    adam_step,
    backward,
    bce_loss,
    dataset_loss,
    forward,
    init_weights,
    load_weights,
    predict_scores,
    save_weights,
    shrunken_spec,
    train,
)
from deepsense.signals import Dataset, ScenarioConfig, build_dataset


def make_dataset(n, n_samples=8, seed=0, kind="gaussian_nb"):
    return build_dataset(ScenarioConfig(signal_kind=kind, n_samples=n_samples, seed=seed), n)


def zero_weights(spec, dtype=np.float32):
    return NetworkWeights(spec, {k: np.zeros(s, dtype=dtype) for k, s in spec.param_shapes().items()})


class TestSpecAndForward:
    def test_defaults_match_reference_architecture(self):
        spec = NetworkSpec(n_samples=32)
        assert (spec.conv1_kernels, spec.conv2_kernels) == (256, 80)
        assert (spec.dense1_units, spec.dense2_units) == (256, 2)
        assert (spec.kernel_width, spec.pad, spec.dropout_rate) == (9, 4, 0.5)

    def test_intermediate_shapes_at_n32(self):
        spec = NetworkSpec(n_samples=32)
        w = init_weights(spec, seed=0)
        x = np.zeros((2, 32), dtype=np.float32)
        prob, cache = forward(x, w, mode="eval")
        h1, h2, h3, h4 = cache["shapes"]
        assert h1 == (1, 2, 32, 256)  # 256 x 2 x 32
        assert h2 == (1, 2, 32, 80)  # 80 x 2 x 32
        assert h3 == (1, 256)
        assert h4 == (1, 2)
        assert isinstance(prob, float)

    @pytest.mark.parametrize("n", [2, 5, 16, 33])
    def test_width_preserved_for_any_n(self, n):
        spec = NetworkSpec(n_samples=n, conv1_kernels=8, conv2_kernels=4, dense1_units=8)
        w = init_weights(spec, seed=1)
        rng = np.random.default_rng(n)
        prob, cache = forward(rng.standard_normal((2, n)), w, mode="eval")
        h1, h2, _, _ = cache["shapes"]
        assert h1[2] == n and h2[2] == n
        assert 0.0 < prob < 1.0

    def test_zero_weights_give_half(self):
        spec = shrunken_spec(8)
        w = zero_weights(spec)
        rng = np.random.default_rng(0)
        for _ in range(5):
            prob, _ = forward(rng.standard_normal((2, 8)), w, mode="eval")
            assert prob == pytest.approx(0.5)

    def test_eval_is_deterministic(self):
        spec = shrunken_spec(8)
        w = init_weights(spec, seed=3)
        x = np.random.default_rng(4).standard_normal((2, 8))
        p1, _ = forward(x, w, mode="eval")
        p2, _ = forward(x, w, mode="eval")
        assert p1 == p2

    def test_shape_mismatch_rejected(self):
        w = init_weights(shrunken_spec(8), seed=0)
        with pytest.raises(DimensionError):
            forward(np.zeros((2, 9)), w, mode="eval")

    def test_prob_is_open_interval_even_for_huge_inputs(self):
        spec = shrunken_spec(8)
        w = init_weights(spec, seed=5)
        prob, _ = forward(np.full((2, 8), 1e8, dtype=np.float64), w, mode="eval")
        assert 0.0 < prob < 1.0


class TestBceLoss:
    def test_half_prob(self):
        assert bce_loss(0.5, 1) == pytest.approx(np.log(2.0), abs=1e-12)

    def test_confident_correct(self):
        assert bce_loss(1.0 - 1e-7, 1) == pytest.approx(1e-7, rel=1e-3)

    def test_confident_wrong(self):
        assert bce_loss(0.9, 0) == pytest.approx(-np.log(0.1), abs=1e-9)

    def test_clamp_prevents_infinities(self):
        assert np.isfinite(bce_loss(0.0, 1))
        assert np.isfinite(bce_loss(1.0, 0))

    def test_empirical_risk_is_negative_mean_log_likelihood(self):
        rng = np.random.default_rng(6)
        probs = rng.uniform(0.05, 0.95, size=10)
        ys = rng.integers(0, 2, size=10)
        mean_bce = np.mean([bce_loss(p, y) for p, y in zip(probs, ys)])
        loglik = np.sum(ys * np.log(probs) + (1 - ys) * np.log(1 - probs))
        assert mean_bce == pytest.approx(-loglik / 10.0, abs=1e-12)


def fd_gradient_check(seed, h=1e-3):
    """Central finite differences on the float64 shrunken build.

    Entries whose +-h evaluations land on different ReLU activation patterns
    are skipped: the difference quotient is not a derivative across a kink.
    Returns (max relative error over checked entries, fraction skipped).
    """
    spec = shrunken_spec(8)
    rng = np.random.default_rng(seed)
    w = init_weights(spec, seed=seed, dtype=np.float64)
    x = rng.standard_normal((2, 8))
    y = int(seed % 2)
    prob, cache = forward(x, w, mode="train", rng=rng)
    masks = cache["masks"]
    grads = backward(cache, y)

    def loss_and_pattern(weights):
        p, c = forward(x, weights, mode="train", masks=masks)
        pattern = tuple(m != 0 for m in (c["m1"], c["m2"], c["m3"]))
        return bce_loss(p, y), pattern

    def same_pattern(a, b):
        return all(np.array_equal(u, v) for u, v in zip(a, b))

    max_rel = 0.0
    checked = skipped = 0
    for name, arr in w.arrays.items():
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, pat_p = loss_and_pattern(w)
            flat[i] = orig - h
            lm, pat_m = loss_and_pattern(w)
            flat[i] = orig
            if not same_pattern(pat_p, pat_m):
                skipped += 1
                continue
            fd = (lp - lm) / (2.0 * h)
            bp = grads[name].reshape(-1)[i]
            rel = abs(bp - fd) / max(1e-8, abs(bp) + abs(fd))
            max_rel = max(max_rel, rel)
            checked += 1
    return max_rel, skipped / (checked + skipped)


class TestBackward:
    @pytest.mark.parametrize("seed", [11, 22, 33, 44, 55])
    def test_gradients_match_finite_differences(self, seed):
        max_rel, skip_frac = fd_gradient_check(seed)
        assert skip_frac < 0.05
        assert max_rel < 1e-4

    def test_balanced_pair_has_zero_head_bias_gradient(self):
        spec = shrunken_spec(8)
        w = zero_weights(spec)
        x = np.random.default_rng(1).standard_normal((1, 2, 8))
        batch = np.concatenate([x, x])
        from deepsense.network import _backward_batch, _forward_batch

        probs, cache = _forward_batch(batch, w, "train", np.random.default_rng(2))
        grads = _backward_batch(cache, np.array([0.0, 1.0]))
        assert grads["head.b"][0] == 0.0
        npt.assert_array_equal(grads["head.w"], 0.0)

    def test_freeze_conv_zeroes_conv_gradients(self):
        spec = shrunken_spec(8)
        w = init_weights(spec, seed=7)
        rng = np.random.default_rng(8)
        prob, cache = forward(rng.standard_normal((2, 8)), w, mode="train", rng=rng)
        grads = backward(cache, 1, freeze_conv=True)
        for name in ("conv1.w", "conv1.b", "conv2.w", "conv2.b"):
            npt.assert_array_equal(grads[name], 0.0)
        assert np.any(grads["dense1.w"] != 0.0)


class TestAdam:
    def test_first_step_is_signed_learning_rate(self):
        spec = shrunken_spec(4)
        w = init_weights(spec, seed=0)
        before = {k: v.copy() for k, v in w.arrays.items()}
        grads = {k: np.full_like(v, 0.37) if k == "head.b" else np.zeros_like(v) for k, v in w.arrays.items()}
        grads["dense2.b"] = np.array([-1.0, 2.0], dtype=np.float32)
        cfg = TrainConfig(learning_rate=1e-3, epochs=1)
        adam_step(w, grads, AdamState.zeros_like(w), cfg)
        delta_b = w.arrays["head.b"] - before["head.b"]
        npt.assert_allclose(delta_b, -1e-3, rtol=1e-4)
        delta_d2 = w.arrays["dense2.b"] - before["dense2.b"]
        npt.assert_allclose(delta_d2, [1e-3, -1e-3], rtol=1e-4)

    def test_zero_gradients_leave_parameters_unchanged(self):
        spec = shrunken_spec(4)
        w = init_weights(spec, seed=1)
        before = {k: v.copy() for k, v in w.arrays.items()}
        grads = {k: np.zeros_like(v) for k, v in w.arrays.items()}
        state = AdamState.zeros_like(w)
        cfg = TrainConfig(learning_rate=0.1, epochs=1)
        for _ in range(3):
            adam_step(w, grads, state, cfg)
        for k in w.arrays:
            assert np.max(np.abs(w.arrays[k] - before[k])) < 1e-12 * cfg.learning_rate

    def test_identical_sequences_are_identical(self):
        spec = shrunken_spec(4)
        rng = np.random.default_rng(9)
        grad_seq = [{k: rng.standard_normal(s).astype(np.float32) for k, s in spec.param_shapes().items()} for _ in range(5)]
        results = []
        for _ in range(2):
            w = init_weights(spec, seed=2)
            state = AdamState.zeros_like(w)
            cfg = TrainConfig(epochs=1)
            for g in grad_seq:
                adam_step(w, g, state, cfg)
            results.append({k: v.copy() for k, v in w.arrays.items()})
        for k in results[0]:
            npt.assert_array_equal(results[0][k], results[1][k])


class TestTrain:
    def test_overfits_repeated_positive_example(self):
        # seed chosen so the 2-unit dense bottleneck stays alive: with both
        # head weights initialized negative, Adam can kill dense2's ReLUs on a
        # single repeated input and the run stalls at the head bias
        rng = np.random.default_rng(10)
        one = rng.standard_normal((2, 16)).astype(np.float32)
        ds = Dataset(16, np.tile(one, (10, 1, 1)), np.ones(10, dtype=np.uint8))
        cfg = TrainConfig(learning_rate=1e-3, epochs=200, batch_size=64, seed=1)
        result = train(ds, cfg)
        assert dataset_loss(ds, result.weights) < 0.01

    def test_bitwise_deterministic(self):
        ds = make_dataset(64)
        cfg = TrainConfig(epochs=2, seed=5)
        a = train(ds, cfg).weights
        b = train(ds, cfg).weights
        for k in a.arrays:
            npt.assert_array_equal(a.arrays[k], b.arrays[k])

    def test_small_step_descent_on_training_set(self):
        # eval-mode training-set loss at lr 1e-5 over 3 epochs; at most one
        # increase tolerated for stochasticity
        ds = make_dataset(128, seed=3)
        spec = NetworkSpec(n_samples=8, conv1_kernels=16, conv2_kernels=8, dense1_units=32)
        w0 = init_weights(spec, seed=12)
        cfg = TrainConfig(learning_rate=1e-5, epochs=3, seed=6)
        result = train(ds, cfg, init=w0, eval_each_epoch=True)
        seq = [dataset_loss(ds, w0)] + result.eval_losses
        violations = sum(1 for a, b in zip(seq, seq[1:]) if b > a + 1e-9)
        assert violations <= 1

    def test_loss_log_length_and_empty_dataset(self):
        ds = make_dataset(16)
        result = train(ds, TrainConfig(epochs=3, seed=0, batch_size=8))
        assert len(result.epoch_losses) == 3
        with pytest.raises(DimensionError):
            train(Dataset.empty(8), TrainConfig(epochs=1))

    def test_init_mismatch_rejected(self):
        ds = make_dataset(8, n_samples=8)
        w = init_weights(shrunken_spec(16), seed=0)
        with pytest.raises(ShapeError):
            train(ds, TrainConfig(epochs=1), init=w)

    def test_divergence_raises_named_error(self):
        ds = make_dataset(32)
        huge = Dataset(8, ds.iq * np.float32(1e18), ds.labels)
        cfg = TrainConfig(learning_rate=1e30, epochs=5, seed=1)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(DivergedTrainingError) as err:
                train(huge, cfg)
        assert "epoch" in str(err.value)

    def test_from_weights_does_not_mutate_base(self):
        ds = make_dataset(32)
        base = init_weights(NetworkSpec(n_samples=8, conv1_kernels=4, conv2_kernels=3, dense1_units=8), seed=1)
        snapshot = {k: v.copy() for k, v in base.arrays.items()}
        train(ds, TrainConfig(epochs=1, seed=2), init=base)
        for k in base.arrays:
            npt.assert_array_equal(base.arrays[k], snapshot[k])


class TestPredictScores:
    def test_single_example_dataset(self):
        ds = make_dataset(1)
        w = init_weights(NetworkSpec(n_samples=8, conv1_kernels=4, conv2_kernels=3, dense1_units=8), seed=0)
        scores = predict_scores(ds, w)
        assert len(scores) == 1
        assert 0.0 < scores[0][0] < 1.0

    def test_shuffle_invariance_as_multiset(self):
        ds = make_dataset(64)
        w = init_weights(NetworkSpec(n_samples=8, conv1_kernels=4, conv2_kernels=3, dense1_units=8), seed=0)
        base = sorted(predict_scores(ds, w))
        perm = np.random.default_rng(0).permutation(len(ds))
        shuffled = sorted(predict_scores(ds.take(perm), w))
        assert base == shuffled


class TestCheckpointIO:
    def test_round_trip_bitwise(self, tmp_path):
        w = init_weights(NetworkSpec(n_samples=8, conv1_kernels=4, conv2_kernels=3, dense1_units=8), seed=4)
        p1, p2 = tmp_path / "a.dsnw", tmp_path / "b.dsnw"
        save_weights(w, p1)
        loaded = load_weights(p1)
        save_weights(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        for k in w.arrays:
            npt.assert_array_equal(loaded.arrays[k], w.arrays[k])

    def test_fresh_checkpoint_scores_identically(self, tmp_path):
        spec = NetworkSpec(n_samples=8, conv1_kernels=4, conv2_kernels=3, dense1_units=8)
        w = init_weights(spec, seed=9)
        ds = make_dataset(16)
        save_weights(w, tmp_path / "w.dsnw")
        loaded = load_weights(tmp_path / "w.dsnw")
        assert predict_scores(ds, loaded) == predict_scores(ds, w)

    def test_load_into_mismatched_spec_names_layer(self, tmp_path):
        w = init_weights(shrunken_spec(8), seed=0)
        save_weights(w, tmp_path / "w.dsnw")
        with pytest.raises(ShapeError) as err:
            load_weights(tmp_path / "w.dsnw", expected_spec=NetworkSpec(n_samples=8))
        assert "conv1.w" in str(err.value)
