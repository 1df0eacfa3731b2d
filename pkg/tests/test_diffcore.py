import math

import numpy as np
import pytest

from reabsnet.diffcore import (
    FiniteDiffReport,
    LayerSpec,
    NetworkSpec,
    attach_cross_entropy,
    attach_weighted_logits,
    backward,
    cast_param_set,
    cross_entropy,
    finite_diff_check,
    forward,
    init_param_set,
    softmax_t,
)
from reabsnet.errors import NetworkConfigError, TapeUsageError


def vector_spec(width=2):
    return NetworkSpec(
        input_shape=(1, 1, width),
        layers=(
            LayerSpec("flat", "flatten"),
            LayerSpec("out", "dense", units=width),
        ),
    )


def small_conv_spec():
    return NetworkSpec(
        input_shape=(6, 6, 1),
        layers=(
            LayerSpec("c1", "conv_relu", kernel=(3, 3), channels=4),
            LayerSpec("p1", "maxpool"),
            LayerSpec("flat", "flatten"),
            LayerSpec("h1", "dense_relu", units=8),
            LayerSpec("out", "dense", units=3),
        ),
    )


class TestSoftmax:
    def test_uniform_on_equal_logits(self):
        for t in (0.1, 1.0, 100.0):
            np.testing.assert_allclose(softmax_t(np.zeros(3), t), np.ones(3) / 3, atol=1e-12)

    def test_matches_direct_evaluation(self):
        # independent 64-bit evaluation of the temperature-softmax formula
        z = np.array([1.0, 2.0, 3.0])
        denom = math.exp(1) + math.exp(2) + math.exp(3)
        expected = [math.exp(v) / denom for v in (1, 2, 3)]
        np.testing.assert_allclose(softmax_t(z, 1.0), expected, rtol=1e-12)

    def test_high_temperature_flattens(self):
        p = softmax_t(np.array([1.0, 2.0, 3.0]), 100.0)
        assert p.max() - p.min() < 0.01
        assert p.argmax() == 2

    def test_rejects_bad_temperature(self):
        with pytest.raises(ValueError):
            softmax_t(np.zeros(3), 0.0)
        with pytest.raises(ValueError):
            softmax_t(np.zeros(3), -1.0)

    def test_distribution_properties(self):
        # logit spread kept moderate so exp() cannot saturate components to
        # exactly 0/1 in float64 even at the lowest temperature
        rng = np.random.default_rng(7)
        for _ in range(50):
            z = rng.uniform(-1.0, 1.0, size=rng.integers(2, 12))
            for t in (0.1, 1.0, 10.0, 100.0):
                p = softmax_t(z, t)
                assert abs(p.sum() - 1.0) < 1e-6
                assert np.all(p > 0) and np.all(p < 1)
                assert p.argmax() == z.argmax()


class TestCrossEntropy:
    def test_one_hot_match_is_zero(self):
        probs = np.array([0.0, 1.0, 0.0])
        target = np.array([0.0, 1.0, 0.0])
        assert cross_entropy(probs, target) == pytest.approx(0.0, abs=1e-9)

    def test_uniform_ten_way(self):
        probs = np.full(10, 0.1)
        target = np.zeros(10)
        target[3] = 1.0
        assert cross_entropy(probs, target) == pytest.approx(math.log(10), rel=1e-12)

    def test_soft_target_matches_scalar_evaluation(self):
        rng = np.random.default_rng(3)
        probs = softmax_t(rng.normal(size=10), 1.0)
        target = softmax_t(rng.normal(size=10) * 50, 100.0)
        expected = -sum(t * math.log(max(p, 1e-12)) for p, t in zip(probs, target))
        assert cross_entropy(probs, target) == pytest.approx(expected, rel=1e-12)

    def test_rejects_mismatch_and_bad_target(self):
        with pytest.raises(ValueError):
            cross_entropy(np.full(3, 1 / 3), np.full(4, 0.25))
        with pytest.raises(ValueError):
            cross_entropy(np.full(3, 1 / 3), np.array([0.5, 0.4, 0.3]))


class TestForward:
    def test_identity_dense(self):
        spec = vector_spec(2)
        params = {"out": (np.eye(2, dtype=np.float32), np.zeros(2, dtype=np.float32))}
        x = np.array([0.3, -0.1], dtype=np.float32).reshape(1, 1, 2)
        logits, tape = forward(spec, params, x, record=False)
        np.testing.assert_allclose(logits, [0.3, -0.1], rtol=1e-6)
        assert tape is None

    def test_hand_convolution(self):
        # 3x3 all-ones kernel over a 4x4 all-ones image, valid padding -> 2x2 of 9s
        spec = NetworkSpec(
            input_shape=(4, 4, 1),
            layers=(
                LayerSpec("c", "conv_relu", kernel=(3, 3), channels=1),
                LayerSpec("flat", "flatten"),
            ),
        )
        params = {"c": (np.ones((3, 3, 1, 1), dtype=np.float32), np.zeros(1, dtype=np.float32))}
        logits, _ = forward(spec, params, np.ones((4, 4, 1), dtype=np.float32))
        np.testing.assert_allclose(logits, np.full(4, 9.0), rtol=1e-6)

    def test_shape_mismatch_names_input(self):
        spec = small_conv_spec()
        params = init_param_set(spec, seed=0)
        with pytest.raises(NetworkConfigError):
            forward(spec, params, np.zeros((5, 5, 1), dtype=np.float32))

    def test_param_mismatch_names_layer(self):
        spec = small_conv_spec()
        params = init_param_set(spec, seed=0)
        w, b = params["h1"]
        params["h1"] = (w[:, :4], b[:4])
        with pytest.raises(NetworkConfigError, match="h1"):
            forward(spec, params, np.zeros((6, 6, 1), dtype=np.float32))

    def test_replay_reproduces_logits_bit_identically(self):
        spec = small_conv_spec()
        params = init_param_set(spec, seed=1)
        x = np.random.default_rng(2).uniform(-0.5, 0.5, size=(3, 6, 6, 1)).astype(np.float32)
        logits, tape = forward(spec, params, x, record=True)
        replayed = tape.replay()
        assert np.array_equal(logits, replayed)

    def test_forward_is_pure(self):
        spec = small_conv_spec()
        params = init_param_set(spec, seed=1)
        x = np.random.default_rng(4).uniform(-0.5, 0.5, size=(6, 6, 1)).astype(np.float32)
        a, _ = forward(spec, params, x)
        b, _ = forward(spec, params, x)
        assert np.array_equal(a, b)

    def test_bad_spec_composition_rejected(self):
        with pytest.raises(NetworkConfigError, match="d1"):
            NetworkSpec(
                input_shape=(6, 6, 1),
                layers=(LayerSpec("d1", "dense", units=4),),  # dense on unflattened input
            )


class TestBackward:
    def test_requires_scalar_head(self):
        spec = vector_spec(2)
        params = {"out": (np.eye(2, dtype=np.float32), np.zeros(2, dtype=np.float32))}
        _, tape = forward(spec, params, np.zeros((1, 1, 2), dtype=np.float32), record=True)
        with pytest.raises(TapeUsageError):
            backward(tape)

    def test_disconnected_loss_gives_zero_input_grad(self):
        spec = vector_spec(2)
        params = {"out": (np.eye(2, dtype=np.float32), np.zeros(2, dtype=np.float32))}
        x = np.array([[[0.2, 0.4]]], dtype=np.float32)
        _, tape = forward(spec, params, x, record=True)
        attach_weighted_logits(tape, np.zeros(2))
        _, input_grad = backward(tape)
        assert np.array_equal(input_grad, np.zeros((1, 1, 1, 2), dtype=np.float32))

    def test_linear_input_grad_is_weight_vector(self):
        # y = w . x, loss = y  =>  d loss / dx = w
        w = np.array([[0.5], [-0.2]], dtype=np.float32)
        spec = NetworkSpec(
            input_shape=(1, 1, 2),
            layers=(LayerSpec("flat", "flatten"), LayerSpec("out", "dense", units=1)),
        )
        params = {"out": (w, np.zeros(1, dtype=np.float32))}
        _, tape = forward(spec, params, np.array([[[0.1, 0.7]]], dtype=np.float32), record=True)
        attach_weighted_logits(tape, np.ones(1))
        param_grads, input_grad = backward(tape)
        np.testing.assert_allclose(input_grad.reshape(2), [0.5, -0.2], rtol=1e-6)
        np.testing.assert_allclose(param_grads["out"][0].reshape(2), [0.1, 0.7], rtol=1e-6)

    def test_maxpool_tie_routes_gradient_to_first_index(self):
        spec = NetworkSpec(
            input_shape=(2, 2, 1),
            layers=(LayerSpec("p", "maxpool"), LayerSpec("flat", "flatten")),
        )
        x = np.full((2, 2, 1), 0.25, dtype=np.float32)  # four-way tie in the window
        _, tape = forward(spec, {}, x, record=True)
        attach_weighted_logits(tape, np.ones(1))
        _, input_grad = backward(tape)
        np.testing.assert_allclose(
            input_grad.reshape(2, 2), [[1.0, 0.0], [0.0, 0.0]], atol=0)

    def test_matches_finite_differences_on_random_small_nets(self):
        rng = np.random.default_rng(11)
        for seed in range(3):
            spec = small_conv_spec()
            params = init_param_set(spec, seed=seed)
            x = rng.uniform(-0.5, 0.5, size=(6, 6, 1)).astype(np.float32)
            report = finite_diff_check(spec, params, x, tolerance=1e-4, samples=40, seed=seed)
            assert report.passed, f"seed {seed}: max rel error {report.max_rel_error:.2e}"

    def test_matches_finite_differences_on_two_branch_net(self):
        spec = NetworkSpec(
            input_shape=(8, 8, 1),
            layers=(
                LayerSpec("a_conv", "conv_relu", kernel=(3, 3), channels=3, inputs=("input",)),
                LayerSpec("a_pool", "maxpool"),
                LayerSpec("a_flat", "flatten"),
                LayerSpec("b_conv", "conv_relu", kernel=(5, 5), channels=2, inputs=("input",)),
                LayerSpec("b_pool", "maxpool"),
                LayerSpec("b_flat", "flatten"),
                LayerSpec("merge", "concat", inputs=("a_flat", "b_flat")),
                LayerSpec("fc", "dense_relu", units=6),
                LayerSpec("out", "dense", units=2),
            ),
        )
        x = np.random.default_rng(0).uniform(-0.5, 0.5, (8, 8, 1)).astype(np.float32)
        report = finite_diff_check(spec, init_param_set(spec, seed=1), x, samples=60, seed=1)
        assert report.passed, f"max rel error {report.max_rel_error:.2e}"

    def test_multiple_heads_share_one_tape(self):
        spec = vector_spec(3)
        params = {"out": (np.eye(3, dtype=np.float32), np.zeros(3, dtype=np.float32))}
        x = np.array([[[0.1, 0.2, 0.3]]], dtype=np.float32)
        _, tape = forward(spec, params, x, record=True)
        heads = [attach_weighted_logits(tape, np.eye(3)[k]) for k in range(3)]
        for k, head in enumerate(heads):
            _, g = backward(tape, head=head)
            np.testing.assert_allclose(g.reshape(3), np.eye(3)[k], atol=1e-7)


class TestFiniteDiffCheck:
    def test_linear_network_near_exact(self):
        spec = vector_spec(3)
        params = {"out": (np.eye(3, dtype=np.float32) * 0.5, np.zeros(3, dtype=np.float32))}
        report = finite_diff_check(spec, params, np.full((1, 1, 3), 0.2, dtype=np.float32),
                                   samples=12, seed=0)
        assert report.passed
        # network part is exact for a linear map; residual is the central-difference
        # truncation error of the smooth loss head
        assert report.max_rel_error < 5e-5

    def test_relu_kink_coordinate_excluded(self):
        # input feeding a ReLU at exactly 0: the +/- step evaluations straddle the kink
        spec = NetworkSpec(
            input_shape=(1, 1, 1),
            layers=(
                LayerSpec("flat", "flatten"),
                LayerSpec("h", "dense_relu", units=1),
                LayerSpec("out", "dense", units=2),
            ),
        )
        params = {
            "h": (np.ones((1, 1), dtype=np.float32), np.zeros(1, dtype=np.float32)),
            "out": (np.array([[1.0, -1.0]], dtype=np.float32), np.zeros(2, dtype=np.float32)),
        }
        x = np.zeros((1, 1, 1), dtype=np.float32)  # pre-activation exactly 0
        report = finite_diff_check(spec, params, x, samples=6, seed=1)
        assert report.skipped >= 1

    def test_report_fails_above_tolerance(self):
        report = FiniteDiffReport(max_rel_error=1e-2, checked=10, skipped=0, tolerance=1e-4)
        assert not report.passed


class TestDtypes:
    def test_float64_cast_roundtrip(self):
        spec = small_conv_spec()
        params = init_param_set(spec, seed=3)
        params64 = cast_param_set(params, np.float64)
        assert all(w.dtype == np.float64 and b.dtype == np.float64
                   for w, b in params64.values())

    def test_cross_entropy_head_matches_standalone_ops(self):
        spec = vector_spec(4)
        params = {"out": (np.eye(4, dtype=np.float64), np.zeros(4, dtype=np.float64))}
        z = np.array([0.3, -1.2, 0.7, 0.1])
        target = np.array([0.1, 0.2, 0.3, 0.4])
        _, tape = forward(spec, params, z.reshape(1, 1, 4), record=True)
        attach_cross_entropy(tape, target, temperature=2.0, reduction="mean")
        via_tape = float(tape.values[tape.scalar_id])
        direct = cross_entropy(softmax_t(z, 2.0), target)
        assert via_tape == pytest.approx(direct, rel=1e-12)
