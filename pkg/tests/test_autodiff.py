"""Tensor engine: forward values, backward rules, and the FD harness."""

import numpy as np
import pytest

from sparsedet import autodiff as ad
from sparsedet.autodiff import ContractError, ShapeError, Tensor


class TestMatmul:
    def test_identity_times_matrix(self):
        m = np.array([[3.0, -1.0], [2.5, 0.5]])
        out = ad.matmul(Tensor(np.eye(2)), Tensor(m))
        np.testing.assert_array_equal(out.data, m)

    def test_hand_product(self):
        out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, (4, 2)), requires_grad=True)
        report = ad.grad_check(lambda x, y: ad.matmul(x, y).sum(), [a, b])
        assert report.max_error < 1e-6

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestBmm:
    def test_batch_of_identities(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-1, 1, (3, 2, 2))
        eyes = np.broadcast_to(np.eye(2), (3, 2, 2)).copy()
        out = ad.bmm(Tensor(eyes), Tensor(x))
        np.testing.assert_array_equal(out.data, x)

    def test_batch_one_reduces_to_matmul(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(-1, 1, (1, 3, 4))
        b = rng.uniform(-1, 1, (1, 4, 2))
        out = ad.bmm(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data[0], a[0] @ b[0], atol=0)

    def test_each_slice_equals_matmul_of_slices(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(-1, 1, (3, 2, 4))
        b = rng.uniform(-1, 1, (3, 4, 2))
        out = ad.bmm(Tensor(a), Tensor(b))
        for i in range(3):
            np.testing.assert_allclose(
                out.data[i], ad.matmul(Tensor(a[i]), Tensor(b[i])).data, atol=0
            )

    def test_batch_mismatch_raises(self):
        with pytest.raises(ShapeError):
            ad.bmm(Tensor(np.zeros((2, 2, 3))), Tensor(np.zeros((3, 3, 2))))


class TestActivations:
    def test_relu_values(self):
        out = ad.relu(Tensor([-1.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 2.0])

    def test_sigmoid_is_stable_at_extremes(self):
        out = ad.sigmoid(Tensor([-1000.0, 0.0, 1000.0]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data[1], 0.5)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        out = ad.softmax(Tensor(rng.uniform(-5, 5, (6, 7))))
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_softmax_survives_large_logits(self):
        out = ad.softmax(Tensor([[1000.0, 999.0]]))
        assert np.all(np.isfinite(out.data))

    def test_layer_norm_of_constant_vector_is_zero(self):
        dim = 5
        x = Tensor(np.full((2, dim), 0.3))
        out = ad.layer_norm(x, Tensor(np.ones(dim)), Tensor(np.zeros(dim)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-9)

    def test_conv2d_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.uniform(-1, 1, (1, 2, 5, 5)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, 3), requires_grad=True)
        report = ad.grad_check(
            lambda *t: (ad.conv2d(t[0], t[1], t[2], stride=2, padding=1) ** 2.0).sum(),
            [x, w, b],
        )
        assert report.max_error < 1e-6

    def test_conv2d_kernel_larger_than_padded_input_raises(self):
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 5, 5))))


class TestGraph:
    def test_reused_tensor_accumulates_gradient(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x + x  # dy/dx = 2x + 1 = 5
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [5.0])

    def test_backward_without_seed_requires_scalar(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(6)
        a = rng.uniform(-1, 1, (4, 4))
        r1 = ad.softmax(Tensor(a)).data
        r2 = ad.softmax(Tensor(a)).data
        np.testing.assert_array_equal(r1, r2)

    def test_broadcast_add_backward_sums(self):
        a = Tensor(np.zeros((3, 2)), requires_grad=True)
        b = Tensor(np.zeros(2), requires_grad=True)
        (a + b).sum().backward()
        np.testing.assert_array_equal(b.grad, [3.0, 3.0])

    def test_no_grad_suppresses_graph(self):
        x = Tensor([1.0], requires_grad=True)
        with ad.no_grad():
            y = x * 3.0
        assert not y.requires_grad


class TestDetach:
    def test_forward_value_identical(self):
        x = Tensor([1.0, -2.0, 3.5])
        np.testing.assert_array_equal(x.detach().data, x.data)

    def test_gradient_blocked_through_detach(self):
        x = Tensor([2.0, 3.0], requires_grad=True)
        y = Tensor([4.0, 5.0], requires_grad=True)
        (x.detach() * y).sum().backward()
        assert x.grad is None

    def test_other_operand_still_receives_gradient(self):
        x = Tensor([2.0, 3.0], requires_grad=True)
        y = Tensor([4.0, 5.0], requires_grad=True)
        (x.detach() * y).sum().backward()
        np.testing.assert_array_equal(y.grad, x.data)


class TestGradCheck:
    def test_quadratic_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        report = ad.grad_check(lambda t: (t**2.0).sum(), [x], tolerance=1e-8)
        assert report.passed
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_constant_function_has_zero_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        report = ad.grad_check(lambda t: (t * 0.0).sum(), [x])
        assert report.max_error == 0.0

    def test_rejects_non_scalar_output(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            ad.grad_check(lambda t: t * 2.0, [x])

    def test_detects_a_corrupted_backward_rule(self):
        def broken_double(t):
            out_data = t.data * 2.0

            def backward(g):
                t._accumulate(g * 3.0)  # wrong on purpose

            return ad.make_node(out_data, (t,), backward)

        x = Tensor([1.0, -0.5], requires_grad=True)
        report = ad.grad_check(lambda t: broken_double(t).sum(), [x])
        assert not report.passed


class TestPerOpGradients:
    """Every differentiable op beats 1e-6 against central differences."""

    def test_whole_op_suite_passes(self):
        from sparsedet.gradcheck import op_checks

        results = op_checks(seed=0)
        failures = [r.name for r in results if not r.passed]
        assert not failures, f"ops failing FD check: {failures}"
