"""Layer semantics, gradient flow through layers, and the Adam optimizer."""

import numpy as np
import pytest

import dnsmooth.autodiff as ad
import dnsmooth.nn as nn
from dnsmooth.errors import ContractViolation, OptimizerError


def gru_weight_arrays(rng, d_in, units, scale=0.4):
    names = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")
    out = {}
    for name in names:
        if name.startswith("w"):
            shape = (d_in, units)
        elif name.startswith("u"):
            shape = (units, units)
        else:
            shape = (units,)
        out[name] = scale * rng.standard_normal(shape)
    return out


class TestDense:
    def test_identity_activation_is_affine(self):
        rng = np.random.default_rng(0)
        x, w, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 2)), rng.standard_normal(2)
        assert np.allclose(nn.dense_forward(x, w, b), x @ w + b, atol=1e-14)

    def test_single_vector_input(self):
        rng = np.random.default_rng(1)
        x, w, b = rng.standard_normal(3), rng.standard_normal((3, 2)), rng.standard_normal(2)
        out = nn.dense_forward(x, w, b, "tanh")
        assert out.shape == (2,)
        assert np.allclose(out, np.tanh(x @ w + b), atol=1e-14)

    def test_unknown_activation_rejected(self):
        with pytest.raises(ContractViolation):
            nn.dense_forward(np.ones(2), np.eye(2), np.zeros(2), "gelu")

    def test_gradients_through_two_layers(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((3, 4))
        arrays = [rng.standard_normal((4, 5)) * 0.5, np.zeros(5),
                  rng.standard_normal((5, 2)) * 0.5, np.zeros(2)]

        def f(xs):
            tape = ad.Tape()
            leaves = [tape.leaf(a) for a in xs]
            h = nn.dense(tape.constant(x), leaves[0], leaves[1], "tanh")
            out = nn.dense(h, leaves[2], leaves[3], "identity")
            loss = ad.reduce_sum(ad.square(out))
            return tape, leaves, loss

        tape, leaves, loss = f(arrays)
        tape.backward(loss)
        analytic = [lf.grad for lf in leaves]
        err = ad.max_gradient_error(lambda xs: float(f(xs)[2].value), arrays, analytic)
        assert err <= 1e-4


class TestGRU:
    def test_zero_everything_fixed_point(self):
        rng = np.random.default_rng(3)
        w = {k: np.zeros_like(v) for k, v in gru_weight_arrays(rng, 4, 6).items()}
        out = nn.gru_cell_forward(rng.standard_normal(4), np.zeros(6), w)
        assert np.array_equal(out, np.zeros(6))

    def test_saturated_update_gate_copies_state(self):
        # update gate ~ 1 must preserve the old hidden state
        rng = np.random.default_rng(4)
        w = gru_weight_arrays(rng, 4, 6)
        w["b_z"] = np.full(6, 20.0)
        w["w_z"] = np.zeros((4, 6))
        w["u_z"] = np.zeros((6, 6))
        h = rng.standard_normal(6)
        out = nn.gru_cell_forward(rng.standard_normal(4), h, w)
        assert np.allclose(out, h, atol=1e-8)

    def test_open_update_gate_follows_candidate(self):
        rng = np.random.default_rng(5)
        w = gru_weight_arrays(rng, 3, 5)
        w["b_z"] = np.full(5, -20.0)
        w["w_z"] = np.zeros((3, 5))
        w["u_z"] = np.zeros((5, 5))
        x, h = rng.standard_normal(3), rng.standard_normal(5)
        r = 1.0 / (1.0 + np.exp(-(x @ w["w_r"] + h @ w["u_r"] + w["b_r"])))
        cand = np.tanh(x @ w["w_h"] + (r * h) @ w["u_h"] + w["b_h"])
        assert np.allclose(nn.gru_cell_forward(x, h, w), cand, atol=1e-8)

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(6)
        w = gru_weight_arrays(rng, 4, 6)
        xs, hs = rng.standard_normal((5, 4)), rng.standard_normal((5, 6))
        batched = nn.gru_cell_forward(xs, hs, w)
        for i in range(5):
            assert np.allclose(batched[i], nn.gru_cell_forward(xs[i], hs[i], w), atol=1e-14)

    def test_gradients(self):
        rng = np.random.default_rng(7)
        names = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")
        base = gru_weight_arrays(rng, 3, 4)
        arrays = [base[k] for k in names]
        x = rng.standard_normal((2, 3))
        h0 = rng.standard_normal((2, 4)) * 0.3

        def f(xs):
            tape = ad.Tape()
            leaves = [tape.leaf(a) for a in xs]
            p = nn.GRUWeights(**dict(zip(names, leaves)))
            h = tape.constant(h0)
            for _ in range(3):  # unrolled: gradients flow through time
                h = nn.gru_cell(tape.constant(x), h, p)
            loss = ad.reduce_sum(ad.square(h))
            return tape, leaves, loss

        tape, leaves, loss = f(arrays)
        tape.backward(loss)
        analytic = [lf.grad for lf in leaves]
        err = ad.max_gradient_error(lambda xs: float(f(xs)[2].value), arrays, analytic)
        assert err <= 1e-4


class TestCausalConv:
    def test_matches_direct_convolution(self):
        rng = np.random.default_rng(8)
        T, d, c, width = 9, 2, 4, 3
        seq = rng.standard_normal((T, d))
        taps = rng.standard_normal((width, d, c))
        bias = rng.standard_normal(c)
        out = nn.causal_conv1d_forward(seq, taps, bias)
        padded = np.vstack([np.zeros((width - 1, d)), seq])
        for t in range(T):
            direct = bias + sum(padded[t + k] @ taps[k] for k in range(width))
            assert np.allclose(out[t], direct, atol=1e-12)

    def test_causality_future_change_does_not_leak(self):
        rng = np.random.default_rng(9)
        seq = rng.standard_normal((8, 3))
        taps = rng.standard_normal((3, 3, 5))
        bias = np.zeros(5)
        base = nn.causal_conv1d_forward(seq, taps, bias)
        bumped = seq.copy()
        bumped[5] += 10.0
        out = nn.causal_conv1d_forward(bumped, taps, bias)
        assert np.array_equal(out[:5], base[:5])
        assert not np.allclose(out[5], base[5])

    def test_step_interface_matches_sequence(self):
        rng = np.random.default_rng(10)
        T, d, c = 6, 2, 3
        seq = rng.standard_normal((T, d))
        taps = rng.standard_normal((3, d, c))
        bias = rng.standard_normal(c)
        full = nn.causal_conv1d_forward(seq, taps, bias)
        tape = ad.Tape()
        tap_vars = [tape.constant(taps[k]) for k in range(3)]
        bias_var = tape.constant(bias)
        window = [tape.constant(np.zeros((1, d))), tape.constant(np.zeros((1, d)))]
        for t in range(T):
            window.append(tape.constant(seq[t][None, :]))
            out = nn.conv_step(window[-3:], tap_vars, bias_var)
            assert np.allclose(out.value[0], full[t], atol=1e-12)


class TestAdam:
    def test_first_step_moves_by_lr_in_sign_direction(self):
        # bias correction makes the first update lr * g / (|g| + eps)
        params = {"w": np.array([1.0, -2.0])}
        grads = {"w": np.array([0.3, -0.7])}
        state = nn.AdamState.for_params(params)
        new = nn.adam_step(params, grads, state, lr=0.01)
        expected = params["w"] - 0.01 * np.sign(grads["w"]) * (
            np.abs(grads["w"]) / (np.abs(grads["w"]) + 1e-8))
        assert np.allclose(new["w"], expected, atol=1e-9)

    def test_three_steps_match_hand_rolled_reference(self):
        def reference(p, gs, lr, b1=0.9, b2=0.999, eps=1e-8):
            m = np.zeros_like(p)
            v = np.zeros_like(p)
            for t, g in enumerate(gs, start=1):
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            return p

        rng = np.random.default_rng(11)
        p0 = rng.standard_normal(4)
        gs = [rng.standard_normal(4) for _ in range(3)]
        params = {"w": p0.copy()}
        state = nn.AdamState.for_params(params)
        for g in gs:
            params = nn.adam_step(params, {"w": g}, state, lr=0.05)
        assert np.allclose(params["w"], reference(p0, gs, 0.05), atol=1e-12)

    def test_zero_gradients_are_fixed_point(self):
        params = {"w": np.array([3.0]), "b": np.array([[1.0, 2.0]])}
        state = nn.AdamState.for_params(params)
        out = params
        for _ in range(5):
            out = nn.adam_step(out, {k: np.zeros_like(v) for k, v in out.items()}, state, lr=0.1)
        for k in params:
            assert np.array_equal(out[k], params[k])

    def test_converges_on_quadratic(self):
        params = {"w": np.array([5.0, -4.0])}
        state = nn.AdamState.for_params(params)
        for _ in range(2000):
            params = nn.adam_step(params, {"w": 2.0 * params["w"]}, state, lr=0.05)
        assert np.abs(params["w"]).max() < 1e-3

    def test_rejects_non_finite_gradient(self):
        params = {"w": np.zeros(2)}
        state = nn.AdamState.for_params(params)
        with pytest.raises(OptimizerError):
            nn.adam_step(params, {"w": np.array([np.nan, 0.0])}, state, lr=0.1)


class TestScheduleAndClipping:
    def test_lr_schedule_decade_boundaries(self):
        assert nn.lr_schedule(0) == pytest.approx(1e-3)
        assert nn.lr_schedule(32) == pytest.approx(1e-3)
        assert nn.lr_schedule(33) == pytest.approx(0.9e-3)
        assert nn.lr_schedule(66) == pytest.approx(0.81e-3)
        assert nn.lr_schedule(199) == pytest.approx(1e-3 * 0.9 ** 6)

    def test_clip_noop_below_threshold(self):
        grads = {"a": np.array([0.3, 0.4])}
        clipped, norm = nn.clip_global_norm(grads, 10.0)
        assert norm == pytest.approx(0.5)
        assert clipped["a"] is grads["a"]

    def test_clip_rescales_to_max_norm(self):
        grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
        clipped, norm = nn.clip_global_norm(grads, 1.0)
        assert norm == pytest.approx(5.0)
        total = np.sqrt(sum(np.sum(g * g) for g in clipped.values()))
        assert total == pytest.approx(1.0)

    def test_uniform_init_bounds_and_determinism(self):
        w1 = nn.uniform_init(np.random.default_rng(42), (100, 50), fan_in=100)
        w2 = nn.uniform_init(np.random.default_rng(42), (100, 50), fan_in=100)
        assert np.array_equal(w1, w2)
        assert np.abs(w1).max() <= 0.1
