#!/usr/bin/env python3
"""
Tests for the Tensor core and differentiable operations
"""

import math

import numpy as np
import pytest

from task_aware_moe import functional as F
from task_aware_moe.errors import ContractError, DimensionError, EmptyReductionError, TokenRangeError
from task_aware_moe.gradcheck import grad_check
from task_aware_moe.tensor import ComputationTape, Tensor, no_grad


# =============================================================================
# MATMUL
# =============================================================================

@pytest.mark.unit
class TestMatmul:
    """Matrix product forward and backward"""

    def test_identity(self, rng):
        """I · M returns M"""
        m = Tensor(rng.normal(size=(3, 4)))
        out = F.matmul(Tensor(np.eye(3)), m)
        np.testing.assert_array_equal(out.data, m.data)

    def test_hand_sum(self):
        """[[1,2],[3,4]] · [[1],[1]] = [[3],[7]]"""
        out = F.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_triple_loop_oracle(self, rng):
        """Random 4×5 · 5×2 matches a brute-force triple loop"""
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
        expected = np.zeros((4, 2))
        for i in range(4):
            for j in range(2):
                for k in range(5):
                    expected[i, j] += a[i, k] * b[k, j]
        out = F.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, expected, atol=1e-12, rtol=0)

    def test_shape_mismatch_names_both_shapes(self):
        """Inner extents must agree"""
        with pytest.raises(DimensionError) as exc:
            F.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)

    def test_backward_reaches_both_operands(self, rng):
        """Gradients of sum(a·b) are 1·bᵀ and aᵀ·1"""
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        F.sum_all(F.matmul(a, b)).backward()
        np.testing.assert_allclose(a.grad, np.ones((2, 4)) @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ np.ones((2, 4)))


# =============================================================================
# SOFTMAX
# =============================================================================

@pytest.mark.unit
class TestSoftmax:
    """Numerically stable softmax"""

    def test_uniform_logits(self):
        """Equal logits give equal probabilities"""
        out = F.softmax(Tensor([[0.0, 0.0, 0.0, 0.0]]), axis=1)
        np.testing.assert_allclose(out.data, [[0.25] * 4], atol=1e-15)

    def test_shift_invariance(self, rng):
        """Adding a constant along the axis changes nothing"""
        x = rng.normal(size=(3, 5))
        a = F.softmax(Tensor(x), axis=1).data
        b = F.softmax(Tensor(x + 17.5), axis=1).data
        np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)

    def test_direct_formula(self):
        """[1,2,3] matches exp/normalize"""
        x = np.array([1.0, 2.0, 3.0])
        expected = np.exp(x) / np.exp(x).sum()
        np.testing.assert_allclose(F.softmax(Tensor(x), axis=0).data, expected, atol=1e-12, rtol=0)

    def test_rows_sum_to_one_for_extreme_input(self, rng):
        """Large logits stay finite and normalized"""
        x = rng.normal(size=(6, 4)) * 500.0
        out = F.softmax(Tensor(x), axis=1).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out.sum(axis=1), np.ones(6), atol=1e-12)

    def test_gradient(self, rng):
        """Backward matches finite differences"""
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 4)))
        assert grad_check(lambda: F.sum_all(F.mul(F.softmax(x, axis=1), w)), [x]) < 1e-6

    def test_masked_softmax_zeroes_hidden_entries(self):
        """Masked positions get probability 0"""
        mask = np.array([[True, False], [True, True]])
        out = F.masked_softmax(Tensor([[5.0, 9.0], [0.0, 0.0]]), mask)
        np.testing.assert_allclose(out.data, [[1.0, 0.0], [0.5, 0.5]])

    def test_masked_softmax_empty_row(self):
        """A row with nothing visible is an error"""
        with pytest.raises(EmptyReductionError):
            F.masked_softmax(Tensor(np.zeros((1, 2))), np.zeros((1, 2), dtype=bool))


# =============================================================================
# ELEMENTWISE SUITE
# =============================================================================

@pytest.mark.unit
class TestElementwise:
    """add, sub, mul, gelu, layer norm and the row-wise helpers"""

    def test_gelu_zero(self):
        """gelu(0) = 0"""
        assert F.gelu(Tensor([0.0])).data[0] == 0.0

    def test_gelu_gradient_at_point_seven(self):
        """Analytic gelu'(0.7) agrees with a central difference"""
        x = Tensor([0.7], requires_grad=True)
        assert grad_check(lambda: F.sum_all(F.gelu(x)), [x], eps=1e-6) < 1e-6

    def test_layer_norm_constant_vector(self):
        """Zero variance is handled by epsilon and yields zeros"""
        out = F.layer_norm(Tensor([[3.0, 3.0, 3.0, 3.0]]))
        np.testing.assert_allclose(out.data, np.zeros((1, 4)), atol=1e-12)

    def test_layer_norm_gradient(self, rng):
        """Gain, bias and input gradients agree with finite differences"""
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        gain = Tensor(rng.normal(size=5), requires_grad=True)
        bias = Tensor(rng.normal(size=5), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 5)))
        assert grad_check(lambda: F.sum_all(F.mul(F.layer_norm(x, gain, bias), w)), [x, gain, bias]) < 1e-6

    def test_scalar_broadcast(self):
        """A single-element operand broadcasts over any shape"""
        out = F.add(Tensor([[1.0, 2.0], [3.0, 4.0]]), 1.0)
        np.testing.assert_array_equal(out.data, [[2.0, 3.0], [4.0, 5.0]])

    def test_scalar_broadcast_gradient_sums(self):
        """d/dα of sum(α·x) is sum(x)"""
        alpha = Tensor(0.5, requires_grad=True)
        x = Tensor([[1.0, 2.0], [3.0, 4.0]])
        F.sum_all(F.mul(x, alpha)).backward()
        assert alpha.grad == pytest.approx(10.0)

    def test_incompatible_shapes(self):
        """Only scalar and same-shape broadcasting exist"""
        with pytest.raises(DimensionError):
            F.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))
        with pytest.raises(DimensionError):
            F.mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_row_helpers_gradients(self, rng):
        """add_bias, scale_rows, take_rows and scatter_add_rows"""
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        bias = Tensor(rng.normal(size=3), requires_grad=True)
        weights = Tensor(rng.normal(size=2), requires_grad=True)
        base = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        probe = Tensor(rng.normal(size=(4, 3)))

        def f():
            rows = F.scale_rows(F.take_rows(F.add_bias(x, bias), [1, 1]), weights)
            return F.sum_all(F.mul(F.scatter_add_rows(base, [0, 3], rows), probe))

        assert grad_check(f, [x, bias, weights, base]) < 1e-6

    def test_take_rows_out_of_range(self):
        with pytest.raises(TokenRangeError):
            F.take_rows(Tensor(np.zeros((2, 2))), [2])

    def test_normalize_rows_zero_sum(self):
        with pytest.raises(EmptyReductionError):
            F.normalize_rows(Tensor([[0.0, 0.0]]))


# =============================================================================
# LOSSES
# =============================================================================

@pytest.mark.unit
class TestLosses:
    """cross_entropy and mse"""

    @pytest.mark.parametrize("vocab", [2, 32, 36])
    def test_uniform_cross_entropy_is_log_v(self, vocab):
        """Uniform logits over V classes cost exactly ln V"""
        loss = F.cross_entropy(Tensor(np.zeros((3, vocab))), [0, 1, vocab - 1])
        assert loss.item() == pytest.approx(math.log(vocab), abs=1e-12)

    def test_cross_entropy_log_sum_exp_oracle(self, rng):
        """Random 3×4 logits vs log-sum-exp"""
        logits = rng.normal(size=(3, 4))
        targets = [0, 3, 2]
        lse = np.log(np.exp(logits).sum(axis=1))
        expected = np.mean(lse - logits[np.arange(3), targets])
        assert F.cross_entropy(Tensor(logits), targets).item() == pytest.approx(expected, abs=1e-12)

    def test_cross_entropy_mask(self, rng):
        """Masked rows are ignored, even with out-of-range targets"""
        logits = rng.normal(size=(3, 4))
        full = F.cross_entropy(Tensor(logits[:2]), [1, 2]).item()
        masked = F.cross_entropy(Tensor(logits), [1, 2, 99], mask=[1, 1, 0]).item()
        assert masked == pytest.approx(full, abs=1e-12)

    def test_cross_entropy_all_masked(self):
        with pytest.raises(EmptyReductionError):
            F.cross_entropy(Tensor(np.zeros((2, 3))), [0, 1], mask=[0, 0])

    def test_cross_entropy_target_out_of_range(self):
        with pytest.raises(TokenRangeError):
            F.cross_entropy(Tensor(np.zeros((1, 3))), [3])

    def test_mse_values(self, rng):
        """Identity, hand sum and a loop oracle"""
        assert F.mse(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0
        assert F.mse(Tensor([1.0, 1.0]), Tensor([0.0, 2.0])).item() == pytest.approx(1.0)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        expected = sum((a[i, j] - b[i, j]) ** 2 for i in range(2) for j in range(3)) / 6
        assert F.mse(Tensor(a), Tensor(b)).item() == pytest.approx(expected, abs=1e-12)

    def test_mse_shape_mismatch(self):
        with pytest.raises(DimensionError):
            F.mse(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


# =============================================================================
# BACKWARD
# =============================================================================

@pytest.mark.unit
class TestBackward:
    """Reverse-mode accumulation over the recorded graph"""

    def test_product_rule(self):
        """d(x·y)/dx at (2, 3) is 3"""
        x = Tensor(2.0, requires_grad=True)
        y = Tensor(3.0, requires_grad=True)
        F.mul(x, y).backward()
        assert x.grad == pytest.approx(3.0)
        assert y.grad == pytest.approx(2.0)

    def test_fan_out_accumulates(self):
        """z = x + x gives dz/dx = 2"""
        x = Tensor(1.5, requires_grad=True)
        F.add(x, x).backward()
        assert x.grad == pytest.approx(2.0)

    def test_shared_subexpression_matches_expanded_tree(self, rng):
        """A DAG reusing h = x·W gives the same gradient as recomputing it"""
        data = rng.normal(size=(2, 3))
        w = Tensor(rng.normal(size=(3, 3)))

        x1 = Tensor(data, requires_grad=True)
        h = F.matmul(x1, w)
        F.sum_all(F.mul(h, h)).backward()

        x2 = Tensor(data, requires_grad=True)
        F.sum_all(F.mul(F.matmul(x2, w), F.matmul(x2, w))).backward()
        np.testing.assert_allclose(x1.grad, x2.grad, atol=1e-12)

    def test_softmax_cross_entropy_composite(self, rng):
        """Composite gradient agrees with finite differences"""
        logits = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        targets = [0, 1, 4, 2]
        assert grad_check(lambda: F.cross_entropy(F.log_softmax(logits, axis=1), targets), [logits]) < 1e-5

    def test_non_scalar_loss(self):
        """backward needs a scalar"""
        with pytest.raises(ContractError):
            Tensor(np.zeros(3), requires_grad=True).backward()

    def test_tape_is_topological(self, rng):
        """Every node's parents appear before it"""
        x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        loss = F.sum_all(F.gelu(F.matmul(x, x)))
        tape = ComputationTape.from_output(loss)
        position = {id(node): i for i, node in enumerate(tape)}
        for node in tape:
            for parent in node._parents:
                assert position[id(parent)] < position[id(node)]

    def test_no_grad_records_nothing(self):
        """Inside no_grad outputs are detached"""
        x = Tensor(1.0, requires_grad=True)
        with no_grad():
            y = F.mul(x, 3.0)
        assert not y.requires_grad

    def test_forward_values_stay_finite(self, rng):
        """A long chain on finite inputs never produces NaN or Inf"""
        x = Tensor(rng.normal(size=(3, 4)))
        y = x
        for _ in range(20):
            y = F.layer_norm(F.gelu(F.add(y, y)))
        assert np.all(np.isfinite(y.data))
