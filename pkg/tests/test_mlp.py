import numpy as np
import pytest

from shapefit.errors import ConfigError, NumericOverflowError
from shapefit.mlp import (
    MlpConfig,
    MlpParams,
    eval_with_grad,
    forward,
    init_glorot,
    min_preactivation_margin,
)

from oracles import rel_err


def fd_param_grads(params, x, step=1e-5):
    """Central finite differences of the scalar output w.r.t. every parameter."""
    grads_w = [np.zeros_like(w) for w in params.weights]
    grads_b = [np.zeros_like(b) for b in params.biases]

    def out():
        return forward(params, x)[0][0]

    for arr, g in list(zip(params.weights, grads_w)) + list(zip(params.biases, grads_b)):
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            hi = out()
            flat[i] = old - step
            lo = out()
            flat[i] = old
            gflat[i] = (hi - lo) / (2.0 * step)
    return grads_w, grads_b


class TestConfig:
    def test_triangle_widths(self):
        assert MlpConfig(hidden_layers=2, first_hidden_width=20).hidden_widths() == [20, 10]
        assert MlpConfig(hidden_layers=10, first_hidden_width=100).hidden_widths() == [
            100, 90, 80, 70, 60, 50, 40, 30, 20, 10,
        ]
        assert MlpConfig(hidden_layers=3, first_hidden_width=2).hidden_widths() == [2, 1, 1]

    def test_validation(self):
        with pytest.raises(ConfigError):
            MlpConfig(input_dim=0)
        with pytest.raises(ConfigError):
            MlpConfig(activation="tanh")


class TestInit:
    def test_glorot_bound_for_4_to_2(self):
        cfg = MlpConfig(input_dim=4, hidden_layers=1, first_hidden_width=2, seed=1)
        params = init_glorot(cfg)
        # first layer fan_in 4, fan_out 2 -> bound sqrt(6/6) = 1
        assert params.weights[0].shape == (2, 4)
        assert np.all(np.abs(params.weights[0]) < 1.0)

    def test_biases_zero(self):
        params = init_glorot(MlpConfig(hidden_layers=3, first_hidden_width=9, seed=2))
        for b in params.biases:
            assert np.all(b == 0.0)

    def test_deterministic(self):
        cfg = MlpConfig(hidden_layers=2, first_hidden_width=8, seed=33)
        a, b = init_glorot(cfg), init_glorot(cfg)
        for wa, wb in zip(a.weights, b.weights):
            assert wa.tobytes() == wb.tobytes()

    def test_output_layer_is_linear_width_one(self):
        params = init_glorot(MlpConfig(hidden_layers=2, first_hidden_width=6, seed=0))
        assert params.weights[-1].shape[0] == 1
        assert params.activations[-1] == "linear"


class TestForward:
    def test_zero_network_outputs_bias(self):
        params = MlpParams(
            weights=[np.zeros((3, 2)), np.zeros((1, 3))],
            biases=[np.zeros(3), np.array([0.7])],
            activations=["linear", "linear"],
        )
        out, _ = forward(params, np.array([[5.0, -2.0], [0.0, 0.0]]))
        assert np.allclose(out, 0.7)

    def test_identity_layer(self):
        params = MlpParams(
            weights=[np.array([[1.0]])],
            biases=[np.array([0.0])],
            activations=["linear"],
        )
        value, grads, _ = eval_with_grad(params, [3.25])
        assert value == 3.25
        assert grads.weights[0][0, 0] == 3.25  # dout/dw = x
        assert grads.biases[0][0] == 1.0

    def test_leaky_relu_definition(self):
        params = MlpParams(
            weights=[np.array([[1.0]]), np.array([[1.0]])],
            biases=[np.array([0.0]), np.array([0.0])],
            activations=["leaky_relu", "linear"],
            leaky_slope=0.01,
        )
        out_pos, _ = forward(params, np.array([[2.0]]))
        out_neg, _ = forward(params, np.array([[-2.0]]))
        assert out_pos[0] == 2.0
        assert out_neg[0] == pytest.approx(-0.02)
        # continuity at zero: the jump across +-eps shrinks with eps
        for eps in (1e-6, 1e-9, 1e-12):
            lo, _ = forward(params, np.array([[-eps]]))
            hi, _ = forward(params, np.array([[eps]]))
            assert abs(lo[0] - hi[0]) <= 2.0 * eps

    def test_repeat_evaluation_bit_identical(self):
        params = init_glorot(MlpConfig(input_dim=3, hidden_layers=2, first_hidden_width=7, seed=5))
        x = np.random.default_rng(0).normal(size=(4, 3))
        a, _ = forward(params, x)
        b, _ = forward(params, x)
        assert a.tobytes() == b.tobytes()

    def test_overflow_raises(self):
        params = MlpParams(
            weights=[np.array([[1e308]]), np.array([[1e10]])],
            biases=[np.array([0.0]), np.array([0.0])],
            activations=["linear", "linear"],
        )
        with pytest.raises(NumericOverflowError):
            forward(params, np.array([[1e10]]))

    def test_dimension_mismatch(self):
        params = init_glorot(MlpConfig(input_dim=2, hidden_layers=1, first_hidden_width=3))
        with pytest.raises(ConfigError):
            eval_with_grad(params, [1.0, 2.0, 3.0])


class TestGradients:
    def test_two_hidden_layer_fd_check(self):
        cfg = MlpConfig(input_dim=2, hidden_layers=2, first_hidden_width=6, seed=12)
        params = init_glorot(cfg)
        rng = np.random.default_rng(99)
        for b in params.biases:
            b += rng.normal(scale=0.3, size=b.shape)
        x = rng.normal(size=2)
        assert min_preactivation_margin(params, x.reshape(1, -1)) > 1e-3
        _, grads, _ = eval_with_grad(params, x)
        fd_w, fd_b = fd_param_grads(params, x.reshape(1, -1))
        for a, f in zip(grads.weights + grads.biases, fd_w + fd_b):
            assert np.max(rel_err(a, f)) < 1e-5

    def test_input_gradient_fd_check(self):
        cfg = MlpConfig(input_dim=3, hidden_layers=2, first_hidden_width=5, seed=8)
        params = init_glorot(cfg)
        rng = np.random.default_rng(21)
        for b in params.biases:
            b += rng.normal(scale=0.3, size=b.shape)
        x = rng.normal(size=3)
        _, _, input_grad = eval_with_grad(params, x)
        step = 1e-6
        for j in range(3):
            xp, xm = x.copy(), x.copy()
            xp[j] += step
            xm[j] -= step
            fd = (forward(params, xp.reshape(1, -1))[0][0] - forward(params, xm.reshape(1, -1))[0][0]) / (2 * step)
            assert rel_err(input_grad[j], fd) < 1e-5

    def test_upstream_scaling(self):
        params = init_glorot(MlpConfig(input_dim=1, hidden_layers=1, first_hidden_width=4, seed=3))
        _, g1, _ = eval_with_grad(params, [0.5], upstream=1.0)
        _, g3, _ = eval_with_grad(params, [0.5], upstream=3.0)
        for a, b in zip(g1.weights, g3.weights):
            assert np.allclose(3.0 * a, b)

    def test_random_configs_gradient_sweep(self):
        # depths 1..10, widths 1..100, away from activation kinks
        rng = np.random.default_rng(2024)
        checked = 0
        attempts = 0
        while checked < 50 and attempts < 500:
            attempts += 1
            cfg = MlpConfig(
                input_dim=int(rng.integers(1, 4)),
                hidden_layers=int(rng.integers(1, 11)),
                first_hidden_width=int(rng.integers(1, 101)),
                seed=int(rng.integers(0, 2**31)),
            )
            params = init_glorot(cfg)
            for b in params.biases:
                b += rng.normal(scale=0.2, size=b.shape)
            x = rng.normal(size=cfg.input_dim)
            if min_preactivation_margin(params, x.reshape(1, -1)) <= 1e-3:
                continue
            out, grads, _ = eval_with_grad(params, x)
            fd_w, fd_b = fd_param_grads(params, x.reshape(1, -1))
            # the network is piecewise linear, so central differences are
            # exact away from kinks up to rounding of order eps*|out|/step;
            # the floor keeps that oracle noise out of the relative error
            floor = max(1e-6, 1e-4 * (1.0 + abs(out)))
            worst = max(
                np.max(rel_err(a, f, floor=floor))
                for a, f in zip(grads.weights + grads.biases, fd_w + fd_b)
            )
            assert worst < 1e-5, f"config {cfg} worst rel err {worst}"
            checked += 1
        assert checked == 50
