import numpy as np
import pytest

from metro import autodiff as ad
from metro.errors import NumericError, ShapeError, ValidationError
from metro.gradcheck import op_cases

from conftest import t64


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(t64(np.eye(2)), t64([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_projector(self):
        out = ad.matmul(t64([[1, 0], [0, 0]]), t64([[5], [7]]))
        np.testing.assert_array_equal(out.data, [[5], [0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
            ad.matmul(t64(np.zeros((3, 4))), t64(np.zeros((3, 2))))

    def test_gradient_of_sum(self, rng):
        a, b = t64(rng.standard_normal((3, 4))), t64(rng.standard_normal((4, 2)))
        assert ad.grad_check(lambda x: ad.sum_(ad.matmul(x, b)), a, 1e-5).max_rel_err < 1e-6
        assert ad.grad_check(lambda x: ad.sum_(ad.matmul(a, x)), b, 1e-5).max_rel_err < 1e-6

    def test_backward_formula(self, rng):
        a, b = t64(rng.standard_normal((3, 4)), True), t64(rng.standard_normal((4, 2)), True)
        g = rng.standard_normal((3, 2))
        ad.matmul(a, b).backward(g)
        np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-14)
        np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-14)

    def test_identity_associativity_bitwise(self, rng):
        A = t64(rng.integers(-8, 8, (4, 5)))
        B = t64(rng.integers(-8, 8, (5, 3)))
        eye = t64(np.eye(5))
        left = ad.matmul(ad.matmul(A, eye), B).data
        right = ad.matmul(A, ad.matmul(eye, B)).data
        assert np.array_equal(left, right)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ad.softmax_rows(t64([[0, 0, 0]])).data, [[1 / 3] * 3], rtol=1e-15)

    def test_no_overflow(self):
        out = ad.softmax_rows(t64([[1000.0, 0.0, 0.0]])).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [[1, 0, 0]], atol=1e-300)

    def test_nan_raises(self):
        with pytest.raises(NumericError):
            ad.softmax_rows(t64([[0.0, np.nan]]))

    def test_rows_stochastic(self, rng):
        out = ad.softmax_rows(t64(rng.standard_normal((50, 17)) * 10)).data
        assert (out >= 0).all() and (out <= 1).all()
        assert np.abs(out.sum(-1) - 1).max() < 1e-9

    def test_gradient(self, rng):
        x = t64(rng.standard_normal((5, 7)))
        w = rng.standard_normal((5, 7))
        rep = ad.grad_check(lambda t: ad.sum_(ad.mul(ad.softmax_rows(t), t64(w))), x, 1e-5)
        assert rep.max_rel_err < 1e-6


class TestLayerNorm:
    def test_constant_row_gives_zeros(self):
        out = ad.layer_norm(t64(np.full((2, 4), 3.5)), t64(np.ones(4)), t64(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_zero_gain_returns_bias(self, rng):
        bias = rng.standard_normal(4)
        out = ad.layer_norm(t64(rng.standard_normal((3, 4))), t64(np.zeros(4)), t64(bias))
        np.testing.assert_array_equal(out.data, np.broadcast_to(bias, (3, 4)))

    def test_normalised_moments(self, rng):
        out = ad.layer_norm(t64(rng.standard_normal((6, 32)) * 5 + 2), t64(np.ones(32)), t64(np.zeros(32)), 1e-12)
        np.testing.assert_allclose(out.data.mean(-1), 0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(-1), 1, atol=1e-9)

    def test_gradient(self, rng):
        g, b = t64(rng.standard_normal(6)), t64(rng.standard_normal(6))
        w = t64(rng.standard_normal((4, 6)))
        rep = ad.grad_check(lambda x: ad.sum_(ad.mul(ad.layer_norm(x, g, b), w)), t64(rng.standard_normal((4, 6))))
        assert rep.max_rel_err < 1e-5

    def test_bad_eps(self):
        with pytest.raises(ValidationError):
            ad.layer_norm(t64(np.ones((1, 2))), t64(np.ones(2)), t64(np.zeros(2)), eps=0.0)


class TestL1Mean:
    def test_equal_is_zero(self, rng):
        x = rng.standard_normal((5, 3))
        assert ad.l1_mean(t64(x), x).item() == 0.0

    def test_forced_value(self):
        assert ad.l1_mean(t64([[1.0, -2.0, 3.0]]), np.zeros((1, 3))).item() == 6.0

    def test_row_mean(self):
        pred = t64([[1.0, 0, 0], [0, 0, 3.0]])
        assert ad.l1_mean(pred, np.zeros((2, 3))).item() == 2.0

    def test_gradient_off_ties(self, rng):
        gt = rng.standard_normal((6, 3))
        x = t64(gt + rng.choice([-1, 1], (6, 3)) * rng.uniform(0.1, 1, (6, 3)))
        assert ad.grad_check(lambda t: ad.l1_mean(t, gt), x, 1e-5).max_rel_err < 1e-6

    def test_tie_subgradient_is_zero(self):
        x = t64([[1.0, 2.0, 3.0]], grad=True)
        ad.l1_mean(x, np.array([[1.0, 0.0, 3.0]])).backward()
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])

    def test_weights_select_samples(self):
        pred = t64(np.ones((2, 1, 3)))
        out = ad.l1_mean(pred, np.zeros((2, 1, 3)), np.array([0.0, 1.0]))
        assert out.item() == 1.5  # only the weighted sample counts, averaged over the batch

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.l1_mean(t64(np.zeros((2, 3))), np.zeros((3, 3)))


class TestGradCheck:
    def test_sum_gives_ones(self, rng):
        x = t64(rng.standard_normal((3, 4)), True)
        ad.sum_(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))
        assert ad.grad_check(ad.sum_, t64(rng.standard_normal((3, 4)))).max_abs_err < 1e-9

    def test_non_scalar_rejected(self, rng):
        with pytest.raises(ShapeError):
            ad.grad_check(lambda x: ad.scale(x, 2.0), t64(rng.standard_normal(3)))

    def test_needs_float64(self):
        with pytest.raises(ValidationError):
            ad.grad_check(ad.sum_, ad.Tensor(np.ones(3, dtype=np.float32)))


CASE_NAMES = [name for name, _, _ in op_cases(0)]


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("name", CASE_NAMES)
def test_every_op_matches_central_differences(name, seed):
    cases = {n: (x, f) for n, x, f in op_cases(seed)}
    x, f = cases[name]
    assert ad.grad_check(f, x, 1e-6).max_rel_err < 1e-5


class TestGraph:
    def test_multi_use_accumulates(self, rng):
        x = t64(rng.standard_normal(4), True)
        y = ad.add(ad.mul(x, x), x)
        ad.sum_(y).backward()
        np.testing.assert_allclose(x.grad, 2 * x.data + 1, rtol=1e-15)

    def test_diamond(self, rng):
        x = t64(rng.standard_normal(3), True)
        a = ad.scale(x, 2.0)
        b = ad.scale(x, 3.0)
        c = ad.mul(a, b)  # 6 x^2
        ad.sum_(ad.add(c, a)).backward()
        np.testing.assert_allclose(x.grad, 12 * x.data + 2, rtol=1e-14)

    def test_backward_order_is_reverse_creation(self, rng):
        order = []
        x = t64(rng.standard_normal(2), True)
        nodes = [x]
        for i in range(4):
            nodes.append(ad.scale(nodes[-1], 1.0 + i))
        for n in nodes[1:]:
            inner = n._backward

            def wrapped(g, inner=inner, n=n):
                order.append(n._seq)
                return inner(g)
            n._backward = wrapped
        ad.sum_(nodes[-1]).backward()
        assert order == sorted(order, reverse=True)
        np.testing.assert_array_equal(x.grad, np.full(2, 24.0))

    def test_no_grad_builds_no_graph(self, rng):
        x = t64(rng.standard_normal(3), True)
        with ad.no_grad():
            y = ad.scale(x, 2.0)
        assert not y.requires_grad and y._parents == ()

    def test_deterministic(self, rng):
        q = t64(rng.standard_normal((2, 9, 8)))
        a = ad.multi_head_attention(q, q, q, 2)[0].data
        b = ad.multi_head_attention(q, q, q, 2)[0].data
        assert np.array_equal(a, b)

    def test_broadcast_limited(self):
        with pytest.raises(ShapeError):
            ad.add(t64(np.zeros((3, 5))), t64(np.zeros(4)))


class TestAttention:
    def test_fused_matches_reference(self, rng):
        q, k, v = (t64(rng.standard_normal((2, 7, 8)), True) for _ in range(3))
        fused, probs = ad.multi_head_attention(q, k, v, 4)
        ref = ad.reference_attention(q, k, v, 4)
        np.testing.assert_allclose(fused.data, ref.data, atol=1e-13)
        w = t64(rng.standard_normal((2, 7, 8)))
        ad.sum_(ad.mul(fused, w)).backward()
        g_fused = [t.grad.copy() for t in (q, k, v)]
        for t in (q, k, v):
            t.grad = None
        ad.sum_(ad.mul(ref, w)).backward()
        for gf, t in zip(g_fused, (q, k, v)):
            np.testing.assert_allclose(gf, t.grad, atol=1e-12)
        assert np.abs(probs.sum(-1) - 1).max() < 1e-12

    def test_float32_rows_sum_to_one(self, rng):
        q = ad.Tensor(rng.standard_normal((2, 445, 32)) * 3, dtype=np.float32)
        _, probs = ad.multi_head_attention(q, q, q, 4)
        assert np.abs(probs.astype(np.float64).sum(-1) - 1).max() < 1e-6

    def test_heads_must_divide(self, rng):
        q = t64(rng.standard_normal((1, 3, 6)))
        with pytest.raises(ShapeError):
            ad.multi_head_attention(q, q, q, 4)


class TestImageOps:
    def test_conv2d_against_loops(self, rng):
        x = rng.standard_normal((2, 3, 6, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        for stride in (1, 2):
            out = ad.conv2d(t64(x), t64(w), t64(b), stride=stride).data
            H = (6 - 3) // stride + 1
            W = (5 - 3) // stride + 1
            ref = np.zeros((2, 4, H, W))
            for n in range(2):
                for o in range(4):
                    for i in range(H):
                        for j in range(W):
                            patch = x[n, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                            ref[n, o, i, j] = (patch * w[o]).sum() + b[o]
            np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_max_pool(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        out = ad.max_pool2d(t64(x), 2).data
        np.testing.assert_array_equal(out, [[[[5, 7], [13, 15]]]])
