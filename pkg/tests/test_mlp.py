"""Encoder/decoder forward, hand-written backprop, optimizers, checkpoints."""

import numpy as np
import pytest

from cflsim.errors import ConfigError, ShapeError, StaleTraceError, TrainingDivergenceError
from cflsim.mlp import (
    CHECKPOINT_FORMAT,
    LEAK,
    OptState,
    backward,
    backward_views,
    decode,
    encode,
    flatten,
    forward_traced,
    init_params,
    layer_shapes,
    load_checkpoint,
    opt_step,
    parameter_count,
    save_checkpoint,
    unflatten,
)
from cflsim.numerics import RngStream


def small_params(d_in=5, hidden=7, embed=3, seed=0):
    return init_params(d_in, hidden, embed, RngStream(seed=seed))


def scalar_loss(params, x, c):
    """Test-local objective with analytic output gradients.

    L = sum(reconstruction^2) + sum(c * embedding), so
    dL/d_reconstruction = 2 * reconstruction and dL/d_embedding = c.
    """
    trace = forward_traced(params, x)
    value = float(np.sum(trace.reconstruction ** 2) + np.sum(c * trace.embedding))
    return value, trace


def fd_grads(params, x, c, h=1e-6):
    """Central finite differences over the flat parameter vector."""
    flat = flatten(params)
    dims = params.dims
    out = np.zeros_like(flat)
    for i in range(flat.size):
        up = flat.copy()
        up[i] += h
        down = flat.copy()
        down[i] -= h
        lu, _ = scalar_loss(unflatten(up, *dims), x, c)
        ld, _ = scalar_loss(unflatten(down, *dims), x, c)
        out[i] = (lu - ld) / (2 * h)
    return out


class TestShapesAndInit:
    def test_layer_shapes(self):
        assert layer_shapes(5, 7, 3) == [(5, 7), (7, 3), (3, 7), (7, 5)]

    def test_parameter_count(self):
        # oracle: sum of w.size + b.size over the four layers
        expected = (5 * 7 + 7) + (7 * 3 + 3) + (3 * 7 + 7) + (7 * 5 + 5)
        assert parameter_count(5, 7, 3) == expected

    def test_xavier_bounds_and_zero_bias(self):
        p = small_params(d_in=30, hidden=40, embed=20)
        for layer, (fi, fo) in zip(p.layers(), layer_shapes(30, 40, 20)):
            bound = np.sqrt(6.0 / (fi + fo))
            assert np.abs(layer.weight).max() <= bound
            # a healthy uniform draw should get close to its bound
            assert np.abs(layer.weight).max() > 0.8 * bound
            np.testing.assert_array_equal(layer.bias, 0.0)

    def test_init_deterministic(self):
        a = flatten(small_params(seed=3))
        b = flatten(small_params(seed=3))
        np.testing.assert_array_equal(a, b)

    def test_encode_decode_shapes(self):
        p = small_params()
        x = np.random.default_rng(0).standard_normal((11, 5))
        e = encode(p, x)
        assert e.shape == (11, 3)
        assert decode(p, e).shape == (11, 5)

    def test_encode_shape_error(self):
        with pytest.raises(ShapeError):
            encode(small_params(), np.zeros((4, 9)))


class TestForward:
    def test_leaky_relu_hidden_linear_output(self):
        # single linear layer identity check: with weights forced positive
        # and input positive, leaky regime never engages
        p = small_params()
        x = np.random.default_rng(1).standard_normal((6, 5))
        t = forward_traced(p, x)
        h1_expected = np.where(t.z1 > 0, t.z1, LEAK * t.z1)
        np.testing.assert_allclose(t.h1, h1_expected, atol=1e-15)
        # embedding is affine in h1 (no activation on the output)
        np.testing.assert_allclose(
            t.embedding, t.h1 @ p.encoder[1].weight + p.encoder[1].bias, atol=1e-12)

    def test_forward_matches_encode_decode(self):
        p = small_params()
        x = np.random.default_rng(2).standard_normal((4, 5))
        t = forward_traced(p, x)
        np.testing.assert_allclose(t.embedding, encode(p, x), atol=1e-15)
        np.testing.assert_allclose(t.reconstruction,
                                   decode(p, t.embedding), atol=1e-15)


class TestBackward:
    def test_matches_finite_differences(self):
        g = np.random.default_rng(0)
        p = small_params()
        x = g.standard_normal((8, 5))
        c = g.standard_normal((8, 3))
        _, trace = scalar_loss(p, x, c)
        grads = backward(p, trace, d_embedding=c,
                         d_reconstruction=2.0 * trace.reconstruction)
        got = flatten(grads)
        want = fd_grads(p, x, c)
        denom = np.maximum(np.maximum(np.abs(got), np.abs(want)), 1e-6)
        assert np.max(np.abs(got - want) / denom) < 1e-4

    def test_embedding_only_gradient(self):
        # reconstruction gradient zero: decoder weight grads must vanish
        g = np.random.default_rng(1)
        p = small_params()
        x = g.standard_normal((6, 5))
        trace = forward_traced(p, x)
        grads = backward(p, trace, d_embedding=np.ones((6, 3)),
                         d_reconstruction=np.zeros((6, 5)))
        for layer in grads.decoder:
            np.testing.assert_array_equal(layer.weight, 0.0)

    def test_two_view_sum(self):
        g = np.random.default_rng(2)
        p = small_params()
        x1 = g.standard_normal((5, 5))
        x2 = g.standard_normal((5, 5))
        t1 = forward_traced(p, x1)
        t2 = forward_traced(p, x2)
        de1 = g.standard_normal((5, 3))
        de2 = g.standard_normal((5, 3))
        dr1 = g.standard_normal((5, 5))
        dr2 = g.standard_normal((5, 5))
        combined = backward_views(p, t1, t2, de1, de2, dr1, dr2)
        separate = flatten(backward(p, t1, de1, dr1)) + \
            flatten(backward(p, t2, de2, dr2))
        np.testing.assert_allclose(flatten(combined), separate, atol=1e-12)

    def test_stale_trace_rejected(self):
        p = small_params()
        x = np.zeros((3, 5))
        trace = forward_traced(p, x)
        moved = opt_step(p, forward_and_unit_grads(p, x),
                         OptState(learning_rate=0.1))
        with pytest.raises(StaleTraceError):
            backward(moved, trace, np.zeros((3, 3)), np.zeros((3, 5)))


def forward_and_unit_grads(p, x):
    trace = forward_traced(p, x)
    return backward(p, trace, np.ones_like(trace.embedding),
                    np.ones_like(trace.reconstruction))


class TestOptimizers:
    def test_sgd_step_exact(self):
        p = small_params()
        grads = unflatten(np.ones(parameter_count(5, 7, 3)), 5, 7, 3)
        opt = OptState(learning_rate=0.01, kind="sgd")
        after = opt_step(p, grads, opt)
        np.testing.assert_allclose(flatten(after), flatten(p) - 0.01,
                                   atol=1e-15)

    def test_adam_first_step_is_signed_lr(self):
        # oracle: with bias correction, step 1 moves by lr * g / (|g| + ~0)
        p = small_params()
        g = np.random.default_rng(3).standard_normal(parameter_count(5, 7, 3))
        g[np.abs(g) < 0.1] = 0.5  # keep eps negligible
        grads = unflatten(g, 5, 7, 3)
        opt = OptState(learning_rate=1e-3)
        after = opt_step(p, grads, opt)
        delta = flatten(after) - flatten(p)
        np.testing.assert_allclose(delta, -1e-3 * np.sign(g), rtol=1e-4)

    def test_adam_state_advances(self):
        p = small_params()
        grads = forward_and_unit_grads(p, np.random.default_rng(4)
                                       .standard_normal((4, 5)))
        opt = OptState(learning_rate=1e-3)
        p1 = opt_step(p, grads, opt)
        assert opt.step == 1
        p2 = opt_step(p1, grads, opt)
        assert opt.step == 2
        assert not np.array_equal(flatten(p1), flatten(p2))

    def test_divergence_detected(self):
        p = small_params()
        bad = unflatten(np.full(parameter_count(5, 7, 3), np.inf), 5, 7, 3)
        with pytest.raises(TrainingDivergenceError):
            opt_step(p, bad, OptState(learning_rate=0.1, kind="sgd"))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            OptState(learning_rate=0.1, kind="rmsprop")


class TestFlatten:
    def test_round_trip_bit_exact(self):
        p = small_params()
        q = unflatten(flatten(p), *p.dims)
        for a, b in zip(p.layers(), q.layers()):
            np.testing.assert_array_equal(a.weight, b.weight)
            np.testing.assert_array_equal(a.bias, b.bias)

    def test_layout_weight_before_bias_row_major(self):
        p = small_params()
        flat = flatten(p)
        w1 = p.encoder[0].weight
        np.testing.assert_array_equal(flat[:w1.size], w1.ravel())
        np.testing.assert_array_equal(flat[w1.size:w1.size + 7],
                                      p.encoder[0].bias)

    def test_length(self):
        assert flatten(small_params()).size == parameter_count(5, 7, 3)

    def test_unflatten_wrong_length(self):
        with pytest.raises(ShapeError):
            unflatten(np.zeros(10), 5, 7, 3)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        p = small_params(seed=11)
        path = tmp_path / "enc.ckpt"
        save_checkpoint(p, path)
        q = load_checkpoint(path)
        np.testing.assert_array_equal(flatten(p), flatten(q))
        assert q.dims == p.dims

    def test_header_is_json_line(self, tmp_path):
        import json
        p = small_params()
        path = tmp_path / "enc.ckpt"
        save_checkpoint(p, path)
        header = json.loads(path.read_bytes().split(b"\n", 1)[0])
        assert header["format"] == CHECKPOINT_FORMAT
        assert header["count"] == parameter_count(5, 7, 3)
        assert header["dtype"] == "<f8"

    def test_truncated_payload_rejected(self, tmp_path):
        p = small_params()
        path = tmp_path / "enc.ckpt"
        save_checkpoint(p, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(ShapeError):
            load_checkpoint(path)

    def test_foreign_format_rejected(self, tmp_path):
        path = tmp_path / "enc.ckpt"
        path.write_bytes(b'{"format": "other"}\n')
        with pytest.raises(ShapeError):
            load_checkpoint(path)
