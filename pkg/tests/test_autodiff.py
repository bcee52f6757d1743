"""Tape and primitive adjoint tests against finite differences and closed forms."""

import numpy as np
import pytest

from hot import autodiff as ad
from hot import diffops as ops
from hot.autodiff import Tape, TapeConsumedError
from hot.features import FeatureMapSpec


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        down = f(x)
        flat[i] = orig
        gf[i] = (up - down) / (2 * eps)
    return g


def check_unary(op, x0, tol=1e-7, **kwargs):
    tape = Tape()
    x = tape.var(x0.copy())
    loss = ad.mean_all(ad.mul(op(x, **kwargs), op(x, **kwargs)))
    tape.backward(loss)

    def f(xv):
        return float(ad.mean_all(ad.mul(op(ad.constant(xv), **kwargs),
                                        op(ad.constant(xv), **kwargs))).value)

    num = numeric_grad(f, x0.copy())
    assert np.abs(x.grad - num).max() <= tol * max(1.0, np.abs(num).max())


class TestPrimitives:
    def test_add_mul_sub(self):
        rng = np.random.default_rng(0)
        a0 = rng.standard_normal((3, 4))
        b0 = rng.standard_normal((3, 4))
        tape = Tape()
        a = tape.var(a0)
        b = tape.var(b0)
        loss = ad.sum_axes(ad.mul(ad.add(a, b), ad.sub(a, b)))  # sum(a^2 - b^2)
        tape.backward(loss)
        assert np.allclose(a.grad, 2 * a0, atol=1e-12)
        assert np.allclose(b.grad, -2 * b0, atol=1e-12)

    def test_broadcast_add_bias(self):
        rng = np.random.default_rng(1)
        x0 = rng.standard_normal((2, 3, 4))
        b0 = rng.standard_normal(4)
        tape = Tape()
        x = tape.var(x0)
        b = tape.var(b0)
        tape.backward(ad.sum_axes(ad.add(x, b)))
        assert np.allclose(x.grad, np.ones_like(x0), atol=0)
        assert np.allclose(b.grad, np.full(4, 6.0), atol=0)

    @pytest.mark.parametrize("op,kw", [
        (ad.exp, {}),
        (ad.gelu, {}),
        (ad.softmax_last, {}),
        (ad.log_softmax_last, {}),
        (ad.reshape, {"shape": (12,)}),
        (ad.transpose, {"axes": (1, 0)}),
        (ad.scale, {"c": -2.5}),
        (ad.shift, {"c": 1.5}),
    ])
    def test_unary_against_numeric(self, op, kw):
        rng = np.random.default_rng(2)
        check_unary(op, rng.standard_normal((3, 4)), **kw)

    def test_log_power(self):
        rng = np.random.default_rng(3)
        x0 = rng.uniform(0.5, 2.0, size=(3, 4))
        check_unary(ad.log, x0)
        check_unary(ad.power, x0, p=-0.5)

    def test_clip_min_passes_above_floor(self):
        rng = np.random.default_rng(4)
        x0 = rng.uniform(1.0, 2.0, size=(5,))
        tape = Tape()
        x = tape.var(x0)
        tape.backward(ad.sum_axes(ad.clip_min(x, 0.5)))
        assert np.array_equal(x.grad, np.ones(5))
        tape2 = Tape()
        x2 = tape2.var(x0)
        tape2.backward(ad.sum_axes(ad.clip_min(x2, 10.0)))
        assert np.array_equal(x2.grad, np.zeros(5))

    def test_sum_axes_keepdims(self):
        rng = np.random.default_rng(5)
        x0 = rng.standard_normal((2, 3, 4))
        tape = Tape()
        x = tape.var(x0)
        out = ad.sum_axes(x, (1,), keepdims=True)
        assert out.shape == (2, 1, 4)
        tape.backward(ad.sum_axes(ad.mul(out, out)))
        expected = 2 * np.broadcast_to(x0.sum(axis=1, keepdims=True), x0.shape)
        assert np.allclose(x.grad, expected, atol=1e-12)


class TestMatmul:
    @pytest.mark.parametrize("ta,tb", [(False, False), (False, True), (True, False), (True, True)])
    def test_batched_transposes(self, ta, tb):
        rng = np.random.default_rng(6)
        a0 = rng.standard_normal((2, 3, 4))
        b_shape = {
            (False, False): (2, 4, 5),
            (False, True): (2, 5, 4),
            (True, False): (2, 3, 5),
            (True, True): (2, 5, 3),
        }[(ta, tb)]
        b0 = rng.standard_normal(b_shape)

        def f_a(av):
            return float(ad.sum_axes(ad.mul(ad.matmul(ad.constant(av), ad.constant(b0), ta=ta, tb=tb),
                                            ad.matmul(ad.constant(av), ad.constant(b0), ta=ta, tb=tb))).value)

        tape = Tape()
        a = tape.var(a0.copy())
        b = tape.var(b0.copy())
        y = ad.matmul(a, b, ta=ta, tb=tb)
        tape.backward(ad.sum_axes(ad.mul(y, y)))
        num_a = numeric_grad(f_a, a0.copy())
        assert np.abs(a.grad - num_a).max() <= 1e-6 * max(1.0, np.abs(num_a).max())

        def f_b(bv):
            return float(ad.sum_axes(ad.mul(ad.matmul(ad.constant(a0), ad.constant(bv), ta=ta, tb=tb),
                                            ad.matmul(ad.constant(a0), ad.constant(bv), ta=ta, tb=tb))).value)

        num_b = numeric_grad(f_b, b0.copy())
        assert np.abs(b.grad - num_b).max() <= 1e-6 * max(1.0, np.abs(num_b).max())

    def test_broadcast_weight(self):
        rng = np.random.default_rng(7)
        x0 = rng.standard_normal((2, 3, 4))
        w0 = rng.standard_normal((4, 5))
        tape = Tape()
        x = tape.var(x0)
        w = tape.var(w0)
        y = ad.matmul(x, w)
        tape.backward(ad.sum_axes(y))
        assert np.allclose(x.grad, np.broadcast_to(w0.sum(axis=1), (2, 3, 4)), atol=1e-12)
        assert np.allclose(w.grad, np.tile(x0.reshape(6, 4).sum(axis=0)[:, None], (1, 5)), atol=1e-12)


class TestEinsum:
    def test_contraction_gradients(self):
        rng = np.random.default_rng(8)
        a0 = rng.standard_normal((3, 4))
        b0 = rng.standard_normal((4, 5))
        tape = Tape()
        a = tape.var(a0)
        b = tape.var(b0)
        tape.backward(ad.sum_axes(ad.einsum("ij,jk->ik", a, b)))
        assert np.allclose(a.grad, np.tile(b0.sum(axis=1), (3, 1)), atol=1e-12)
        assert np.allclose(b.grad, np.tile(a0.sum(axis=0)[:, None], (1, 5)), atol=1e-12)

    def test_repeated_operand(self):
        rng = np.random.default_rng(9)
        x0 = rng.standard_normal(5)
        tape = Tape()
        x = tape.var(x0)
        tape.backward(ad.einsum("i,i->", x, x))
        assert np.allclose(x.grad, 2 * x0, atol=1e-12)


class TestSoftmaxJacobian:
    def test_action_matches_analytic_on_123(self):
        # J = diag(p) - p p^T acting on an arbitrary upstream gradient
        rng = np.random.default_rng(10)
        x0 = np.array([[1.0, 2.0, 3.0]])
        g = rng.standard_normal((1, 3))
        tape = Tape()
        x = tape.var(x0)
        out = ad.softmax_last(x)
        tape.backward(ad.sum_axes(ad.mul(out, ad.constant(g))))
        p = np.exp(x0[0] - x0[0].max())
        p /= p.sum()
        jac = np.diag(p) - np.outer(p, p)
        assert np.abs(x.grad[0] - jac @ g[0]).max() <= 1e-12


class TestTape:
    def test_mode_product_of_identity_sums_to_ones(self):
        rng = np.random.default_rng(11)
        t0 = rng.standard_normal((3, 4))
        tape = Tape()
        t = tape.var(t0)
        out = ops.mode_product_v(t, ad.constant(np.eye(4)), 1)
        tape.backward(ad.sum_axes(out))
        assert np.array_equal(t.grad, np.ones_like(t0))

    def test_tape_reuse_raises(self):
        tape = Tape()
        x = tape.var(np.array(2.0))
        loss = ad.mul(x, x)
        tape.backward(loss)
        with pytest.raises(TapeConsumedError):
            tape.backward(loss)

    def test_backward_needs_scalar(self):
        tape = Tape()
        x = tape.var(np.ones(3))
        with pytest.raises(ValueError):
            tape.backward(ad.mul(x, x))

    def test_constants_collect_no_grad(self):
        tape = Tape()
        x = tape.var(np.array(3.0))
        c = ad.constant(np.array(4.0))
        tape.backward(ad.mul(x, c))
        assert x.grad == pytest.approx(4.0)
        assert c.grad is None

    def test_grad_accumulates_across_uses(self):
        tape = Tape()
        x = tape.var(np.array(3.0))
        tape.backward(ad.add(ad.mul(x, x), ad.scale(x, 5.0)))
        assert x.grad == pytest.approx(11.0)


class TestDiffOps:
    def test_matricize_fold_round_trip_gradient(self):
        rng = np.random.default_rng(12)
        t0 = rng.standard_normal((2, 3, 4))
        tape = Tape()
        t = tape.var(t0)
        out = ops.fold_v(ops.matricize_v(t, 1), 1, (2, 3, 4))
        assert np.array_equal(out.value, t0)
        tape.backward(ad.sum_axes(ad.mul(out, ad.constant(t0))))
        assert np.allclose(t.grad, t0, atol=0)

    def test_batched_mode_apply_matches_loop(self):
        rng = np.random.default_rng(13)
        t0 = rng.standard_normal((2, 3, 4, 5))
        s0 = rng.standard_normal((2, 6, 4))
        out = ops.batched_mode_apply_v(ad.constant(t0), ad.constant(s0), 2)
        expected = np.einsum("bij,bcjd->bcid", s0, t0)
        assert np.abs(out.value - expected).max() <= 1e-12

    def test_kernelized_apply_forward_matches_reference(self):
        from hot.attention import kernelized_mode_apply

        rng = np.random.default_rng(14)
        spec = FeatureMapSpec(16, 4, seed=5)
        v0 = rng.standard_normal((3, 5, 4))
        qt0 = rng.standard_normal((3, 4)) * 0.5
        kt0 = rng.standard_normal((3, 4)) * 0.5
        # batched path with batch size 1 equals the unbatched reference
        out = ops.kernelized_mode_apply_v(
            ad.constant(v0[None]), ad.constant(qt0[None]), ad.constant(kt0[None]), 1, spec)
        ref = kernelized_mode_apply(v0, qt0, kt0, 0, spec)
        assert np.abs(out.value[0] - ref).max() <= 1e-12

    def test_layer_norm_normalizes(self):
        rng = np.random.default_rng(15)
        x0 = rng.standard_normal((4, 6)) * 3 + 1
        out = ops.layer_norm_v(ad.constant(x0), ad.constant(np.ones(6)), ad.constant(np.zeros(6)))
        assert np.abs(out.value.mean(axis=-1)).max() <= 1e-12
        assert np.abs(out.value.std(axis=-1) - 1.0).max() <= 1e-3

    def test_cross_entropy_matches_plain(self):
        from hot.train import cross_entropy

        rng = np.random.default_rng(16)
        logits = rng.standard_normal((5, 3))
        labels = rng.integers(0, 3, size=5)
        v = ops.cross_entropy_v(ad.constant(logits), labels)
        assert v.value == pytest.approx(cross_entropy(logits, labels), abs=1e-12)
