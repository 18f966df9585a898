"""Gradient correctness of the tape engine against central differences."""

import numpy as np
import pytest

import dnsmooth.autodiff as ad
from dnsmooth.errors import ContractViolation, NumericalError

TOL = 1e-4


def check(build, arrays, h=1e-6, samples=None, seed=0):
    """Tape a scalar function, backprop, compare to finite differences."""

    def run(xs):
        tape = ad.Tape()
        leaves = [tape.leaf(x) for x in xs]
        return tape, leaves, build(tape, leaves)

    tape, leaves, loss = run(arrays)
    tape.backward(loss)
    analytic = [lf.grad if lf.grad is not None else np.zeros_like(lf.value) for lf in leaves]

    def f(xs):
        return float(run(xs)[2].value)

    err = ad.max_gradient_error(f, arrays, analytic, h=h, samples=samples,
                                rng=np.random.default_rng(seed))
    assert err <= TOL, f"max relative gradient error {err:.3e}"


class TestElementwise:
    def test_add_mul_broadcast(self):
        rng = np.random.default_rng(0)
        arrays = [rng.standard_normal((4, 3)), rng.standard_normal(3), rng.standard_normal((4, 1))]
        check(lambda t, xs: ad.reduce_sum(ad.mul(ad.add(xs[0], xs[1]), xs[2])), arrays)

    def test_sub_neg_square(self):
        rng = np.random.default_rng(1)
        arrays = [rng.standard_normal((5,)), rng.standard_normal((5,))]
        check(lambda t, xs: ad.reduce_sum(ad.square(ad.sub(xs[0], ad.neg(xs[1])))), arrays)

    def test_activations(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((3, 4)) * 2.0
        x[np.abs(x) < 0.2] += 0.5  # keep clear of the relu kink
        for op in (ad.tanh, ad.sigmoid, ad.relu, ad.softplus, ad.exp):
            check(lambda t, xs, op=op: ad.reduce_sum(op(xs[0])), [x])

    def test_log_positive_domain(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(0.5, 3.0, size=(4,))
        check(lambda t, xs: ad.reduce_sum(ad.log(xs[0])), [x])

    def test_softplus_extreme_arguments_stable(self):
        x = np.array([-800.0, -50.0, 0.0, 50.0, 800.0])
        v = ad.softplus_values(x)
        assert np.all(np.isfinite(v))
        assert v[0] == 0.0 and v[-1] == pytest.approx(800.0)
        s = ad.sigmoid_values(x)
        assert np.all((s >= 0.0) & (s <= 1.0)) and np.all(np.isfinite(s))


class TestMatmul:
    def test_plain_2d(self):
        rng = np.random.default_rng(4)
        arrays = [rng.standard_normal((4, 3)), rng.standard_normal((3, 5))]
        check(lambda t, xs: ad.reduce_sum(ad.matmul(xs[0], xs[1])), arrays)

    def test_batched_times_shared(self):
        rng = np.random.default_rng(5)
        arrays = [rng.standard_normal((6, 2, 3)), rng.standard_normal((3, 3))]
        check(lambda t, xs: ad.reduce_sum(ad.square(ad.matmul(xs[0], xs[1]))), arrays)

    def test_batched_times_batched(self):
        rng = np.random.default_rng(6)
        arrays = [rng.standard_normal((4, 2, 3)), rng.standard_normal((4, 3, 2))]
        check(lambda t, xs: ad.reduce_sum(ad.matmul(xs[0], xs[1])), arrays)

    def test_rejects_vectors(self):
        tape = ad.Tape()
        with pytest.raises(ContractViolation):
            ad.matmul(tape.leaf(np.ones(3)), tape.leaf(np.ones((3, 2))))


class TestShapes:
    def test_reduce_sum_axis_keepdims(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((3, 4, 2))
        check(lambda t, xs: ad.reduce_sum(ad.square(ad.reduce_sum(xs[0], axis=1))), [x])
        check(lambda t, xs: ad.reduce_sum(ad.mul(xs[0], ad.reduce_sum(xs[0], axis=2, keepdims=True))), [x])

    def test_reshape_round_trip(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 6))
        check(lambda t, xs: ad.reduce_sum(ad.square(ad.reshape(xs[0], (3, 4)))), [x])

    def test_concat_gradient_splits(self):
        rng = np.random.default_rng(9)
        arrays = [rng.standard_normal((2, 3)), rng.standard_normal((2, 5))]
        check(lambda t, xs: ad.reduce_sum(ad.square(ad.concat(xs, axis=1))), arrays)

    def test_fan_out_accumulates(self):
        x = np.array([1.5])
        tape = ad.Tape()
        lf = tape.leaf(x)
        # y = x*x + x used twice more: dy/dx = 2x + 1
        loss = ad.reduce_sum(ad.add(ad.mul(lf, lf), lf))
        tape.backward(loss)
        assert lf.grad[0] == pytest.approx(2 * 1.5 + 1)


class TestLinalgPrimitives:
    def test_hdh_forward(self):
        rng = np.random.default_rng(10)
        H = rng.standard_normal((2, 3))
        v = rng.uniform(0.5, 2.0, size=(4, 3))
        tape = ad.Tape()
        out = ad.hdh(tape.leaf(v), H)
        for b in range(4):
            assert np.allclose(out.value[b], H @ np.diag(v[b]) @ H.T, atol=1e-12)

    def test_hdh_gradient(self):
        rng = np.random.default_rng(11)
        H = rng.standard_normal((2, 3))
        W = rng.standard_normal((4, 2, 2))
        v = rng.uniform(0.5, 2.0, size=(4, 3))
        check(lambda t, xs: ad.reduce_sum(ad.mul(ad.hdh(xs[0], H), W)), [v])

    def test_psd_inverse_forward_and_gradient(self):
        rng = np.random.default_rng(12)
        a = rng.standard_normal((3, 2, 2))
        spd = a @ np.swapaxes(a, -1, -2) + 2.0 * np.eye(2)
        tape = ad.Tape()
        out = ad.psd_inverse(tape.leaf(spd))
        assert np.allclose(out.value @ spd, np.broadcast_to(np.eye(2), (3, 2, 2)), atol=1e-10)
        W = rng.standard_normal((3, 2, 2))
        check(lambda t, xs: ad.reduce_sum(ad.mul(ad.psd_inverse(xs[0]), W)), [spd])

    def test_logdet_forward_and_gradient(self):
        rng = np.random.default_rng(13)
        a = rng.standard_normal((4, 3, 3))
        spd = a @ np.swapaxes(a, -1, -2) + 3.0 * np.eye(3)
        tape = ad.Tape()
        out = ad.logdet_psd(tape.leaf(spd))
        expected = np.array([np.linalg.slogdet(s)[1] for s in spd])
        assert np.allclose(out.value, expected, atol=1e-10)
        w = rng.standard_normal(4)
        check(lambda t, xs: ad.reduce_sum(ad.mul(ad.logdet_psd(xs[0]), w)), [spd])

    def test_psd_inverse_rejects_indefinite(self):
        tape = ad.Tape()
        with pytest.raises(NumericalError):
            ad.psd_inverse(tape.leaf(-np.eye(2)))


class TestTapeMechanics:
    def test_backward_requires_scalar(self):
        tape = ad.Tape()
        lf = tape.leaf(np.ones(3))
        with pytest.raises(ContractViolation):
            tape.backward(lf)

    def test_backward_rejects_foreign_node(self):
        t1, t2 = ad.Tape(), ad.Tape()
        loss = ad.reduce_sum(t1.leaf(np.ones(2)))
        with pytest.raises(ContractViolation):
            t2.backward(loss)

    def test_seed_scales_gradients(self):
        tape = ad.Tape()
        lf = tape.leaf(np.array([2.0, 3.0]))
        tape.backward(ad.reduce_sum(ad.square(lf)), seed=0.25)
        assert np.allclose(lf.grad, 0.25 * 2 * np.array([2.0, 3.0]))

    def test_gradients_deterministic(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((5, 4))
        w = rng.standard_normal((4, 4))

        def run():
            tape = ad.Tape()
            lx, lw = tape.leaf(x), tape.leaf(w)
            h = ad.tanh(ad.matmul(lx, lw))
            loss = ad.reduce_sum(ad.square(ad.add(h, ad.matmul(h, lw))))
            tape.backward(loss)
            return lx.grad.copy(), lw.grad.copy()

        g1, g2 = run(), run()
        assert np.array_equal(g1[0], g2[0]) and np.array_equal(g1[1], g2[1])

    def test_gaussian_loglik_composite(self):
        # the exact op chain the smoother uses for one step's log-likelihood
        rng = np.random.default_rng(15)
        B, m, n = 3, 3, 2
        H = rng.standard_normal((n, m))
        Cw = 0.5 * np.eye(n)
        y = rng.standard_normal((B, n))
        mean0 = rng.standard_normal((B, m))
        rawv0 = rng.standard_normal((B, m))

        def build(t, xs):
            mean, rawv = xs
            v = ad.add(ad.softplus(rawv), 1e-6)
            R = ad.add(ad.hdh(v, H), Cw)
            e = ad.sub(y, ad.matmul(mean, H.T))
            alpha = ad.matmul(ad.psd_inverse(R), ad.reshape(e, (B, n, 1)))
            maha = ad.reduce_sum(ad.mul(ad.reshape(e, (B, n, 1)), alpha))
            return ad.add(ad.mul(ad.add(ad.reduce_sum(ad.logdet_psd(R)), maha), -0.5),
                          -0.5 * B * n * np.log(2 * np.pi))

        check(build, [mean0, rawv0])
