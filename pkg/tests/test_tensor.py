"""Op-level contracts of the autodiff engine, frozen hand values first."""

import numpy as np
import pytest

from nerlab import kernels
from nerlab import tensor as T
from nerlab.errors import (
    ConfigurationError,
    ContractError,
    DegenerateInputError,
    OracleError,
    ShapeMismatchError,
)
from nerlab.gradcheck import (
    CHECKS,
    check_gradients,
    finite_diff_check,
    inject_sign_flip,
    run_gradcheck,
)
from nerlab.tensor import Tape, Tensor, backward


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        assert np.array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])

    def test_row_times_column(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[11.0]])

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(4, 5)))
        b = Tensor(rng.normal(size=(5, 3)))
        err = check_gradients(lambda x, y: T.sum_all(T.matmul(x, y)), [a, b])
        assert err < 1e-6

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeMismatchError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestRmsNorm:
    def test_unit_rms_is_identity(self):
        out = T.rms_norm(Tensor([1.0, 1.0, 1.0, 1.0]), Tensor(np.ones(4)), 0.0)
        assert np.allclose(out.data, [1.0, 1.0, 1.0, 1.0], atol=1e-15)

    def test_three_four(self):
        # RMS of [3, 4] is sqrt((9 + 16) / 2) = sqrt(12.5)
        expected = np.array([3.0, 4.0]) / np.sqrt(12.5)
        out = T.rms_norm(Tensor([3.0, 4.0]), Tensor(np.ones(2)), 0.0)
        assert np.allclose(out.data, expected, atol=1e-15)

    def test_gradient(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(2, 8)))
        gain = Tensor(rng.normal(size=(8,)) + 1.5)
        err = check_gradients(lambda a, g: T.sum_all(T.rms_norm(a, g, 1e-5)), [x, gain])
        assert err < 1e-6

    def test_gain_dimension_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            T.rms_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), 1e-5)


class TestSwiglu:
    def test_zero_input(self):
        out = T.swiglu(Tensor(np.zeros((2, 3))), Tensor(np.ones((3, 4))), Tensor(np.ones((3, 4))))
        assert np.array_equal(out.data, np.zeros((2, 4)))

    def test_scalar_case(self):
        # silu(1) * 2 = 2 / (1 + e^-1)
        expected = 2.0 / (1.0 + np.exp(-1.0))
        out = T.swiglu(Tensor([[1.0]]), Tensor([[1.0]]), Tensor([[2.0]]))
        assert np.allclose(out.data, [[expected]], atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(3, 4)))
        wg = Tensor(rng.normal(size=(4, 5)))
        wu = Tensor(rng.normal(size=(4, 5)))
        err = check_gradients(lambda a, g, u: T.sum_all(T.swiglu(a, g, u)), [x, wg, wu])
        assert err < 1e-6


class TestRope:
    def test_position_zero_is_identity(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 2, 8))
        out = T.rope_rotate(Tensor(x), [0], 10000.0)
        assert np.allclose(out.data, x, atol=1e-15)

    def test_quarter_turn(self):
        # head_dim 2 means a single pair rotated by exactly the position angle
        out = T.rope_rotate(Tensor([[1.0, 0.0]]), [np.pi / 2], 7.0)
        assert np.allclose(out.data, [[0.0, 1.0]], atol=1e-12)

    def test_pair_norms_preserved(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(5, 3, 6))
        out = T.rope_rotate(Tensor(x), list(range(5)), 10000.0).data
        before = np.hypot(x[..., 0::2], x[..., 1::2])
        after = np.hypot(out[..., 0::2], out[..., 1::2])
        assert np.abs(before - after).max() < 1e-9

    def test_odd_head_dim_rejected(self):
        with pytest.raises(ConfigurationError):
            T.rope_rotate(Tensor(np.zeros((2, 3))), [0, 1], 10.0)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        out = T.softmax_cross_entropy(Tensor(np.zeros((2, 4))), [1, 3])
        assert abs(out.item() - np.log(4.0)) < 1e-12

    def test_peaked_logits(self):
        expected = -np.log(np.exp(10.0) / (np.exp(10.0) + 2.0))
        out = T.softmax_cross_entropy(Tensor([[10.0, 0.0, 0.0]]), [0])
        assert abs(out.item() - expected) < 1e-12
        assert abs(out.item() - 9.08e-5) < 1e-6

    def test_gradient_is_softmax_minus_onehot(self):
        logits = Tensor(np.zeros((2, 4)), requires_grad=True)
        with Tape() as tape:
            loss = T.softmax_cross_entropy(logits, [0, 2])
        backward(tape, loss)
        expected = np.full((2, 4), 0.25)
        expected[0, 0] -= 1.0
        expected[1, 2] -= 1.0
        assert np.allclose(logits.grad, expected / 2.0, atol=1e-12)

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(5)
        logits = Tensor(rng.normal(size=(3, 6)))
        targets = [4, 0, 2]
        err = check_gradients(lambda l: T.softmax_cross_entropy(l, targets), [logits])
        assert err < 1e-6

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            T.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])


class TestCosineSimilarity:
    def test_self_similarity(self):
        v = Tensor([1.0, -2.0, 0.5])
        assert abs(T.cosine_similarity(v, v).item() - 1.0) < 1e-12

    def test_orthogonal(self):
        out = T.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0]))
        assert abs(out.item()) < 1e-15

    def test_hand_value(self):
        out = T.cosine_similarity(Tensor([1.0, 2.0]), Tensor([2.0, 1.0]))
        assert abs(out.item() - 0.8) < 1e-12

    def test_zero_norm_raises(self):
        with pytest.raises(DegenerateInputError):
            T.cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(x)
        backward(tape, loss)
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_quadratic_gradient(self):
        x = Tensor(np.array([[1.0, -2.0, 3.0]]), requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(T.mul(x, x))
        backward(tape, loss)
        assert np.allclose(x.grad, 2.0 * x.data, atol=1e-15)

    def test_double_backward_accumulates_exactly_twice(self):
        x = Tensor(np.array([[0.3, -1.2], [2.0, 0.1]]), requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(T.mul(x, x))
        backward(tape, loss)
        once = x.grad.copy()
        backward(tape, loss)
        assert np.array_equal(x.grad, 2.0 * once)

    def test_fanout_accumulation(self):
        x = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(T.add(x, x))
        backward(tape, loss)
        assert np.array_equal(x.grad, np.full((1, 2), 2.0))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            y = T.add(x, x)
        with pytest.raises(ContractError):
            backward(tape, y)


class TestCausalSoftmax:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(6)
        probs = T.causal_softmax(Tensor(rng.normal(size=(7, 7)))).data
        assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-12

    def test_strictly_causal(self):
        rng = np.random.default_rng(7)
        probs = T.causal_softmax(Tensor(rng.normal(size=(5, 5)))).data
        assert np.array_equal(np.triu(probs, k=1), np.zeros((5, 5)))


class TestFiniteDifferenceOracle:
    def test_all_ops_pass_at_tolerance(self):
        results = run_gradcheck(sorted(CHECKS), seeds=3)
        assert all(err < 1e-4 for err in results.values()), results

    def test_nonfinite_function_raises(self):
        x = Tensor([np.inf, 1.0])
        with pytest.raises(OracleError):
            finite_diff_check(lambda t: T.sum_all(t), x)

    def test_sign_flip_is_detected(self):
        rng = np.random.default_rng(8)
        a = Tensor(rng.normal(size=(3, 3)))
        b = Tensor(rng.normal(size=(3, 3)))
        with inject_sign_flip("matmul"):
            err = check_gradients(lambda x, y: T.sum_all(T.matmul(x, y)), [a, b])
        assert err > 1e-4


class TestDebugChecks:
    def test_nan_output_raises_when_enabled(self):
        T.set_debug_checks(True)
        try:
            with np.errstate(invalid="ignore"), pytest.raises(ContractError):
                T.add(Tensor([np.inf]), Tensor([-np.inf]))
        finally:
            T.set_debug_checks(False)


@pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba unavailable")
class TestKernelBackendsAgree:
    def test_all_kernels_match(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(6, 8))
        gain = rng.normal(size=8) + 1.0
        dy = rng.normal(size=(6, 8))
        scores = rng.normal(size=(6, 6))
        dprobs = rng.normal(size=(6, 6))
        x3 = np.ascontiguousarray(rng.normal(size=(4, 2, 8)))
        cos = np.cos(rng.normal(size=(4, 4)))
        sin = np.sin(rng.normal(size=(4, 4)))
        logits = rng.normal(size=(5, 9))
        targets = rng.integers(0, 9, size=5)

        cases = {
            "causal_softmax_fwd": (scores,),
            "rms_norm_fwd": (x, gain, 1e-5),
            "rope_apply": (x3, cos, sin),
            "silu_fwd": (x,),
            "silu_bwd": (x, dy),
            "softmax_xent_fwd": (logits, targets),
        }
        for name, args in cases.items():
            np_fn, nb_fn = kernels.implementations(name)
            a, b = np_fn(*args), nb_fn(*args)
            a = a if isinstance(a, tuple) else (a,)
            b = b if isinstance(b, tuple) else (b,)
            for left, right in zip(a, b):
                assert np.allclose(left, right, rtol=1e-10, atol=1e-12), name

        probs = kernels.implementations("causal_softmax_fwd")[0](scores)
        np_fn, nb_fn = kernels.implementations("causal_softmax_bwd")
        assert np.allclose(np_fn(probs, dprobs), nb_fn(probs, dprobs), rtol=1e-10)

        _, inv = kernels.implementations("rms_norm_fwd")[0](x, gain, 1e-5)
        np_fn, nb_fn = kernels.implementations("rms_norm_bwd")
        for left, right in zip(np_fn(x, gain, inv, dy), nb_fn(x, gain, inv, dy)):
            assert np.allclose(left, right, rtol=1e-10)

        p1, g = rng.normal(size=16), rng.normal(size=16)
        m1, v1 = np.zeros(16), np.zeros(16)
        p2, m2, v2 = p1.copy(), m1.copy(), v1.copy()
        np_fn, nb_fn = kernels.implementations("adam_step")
        np_fn(p1, g, m1, v1, 1e-3, 0.9, 0.999, 1e-8, 1)
        nb_fn(p2, g, m2, v2, 1e-3, 0.9, 0.999, 1e-8, 1)
        assert np.allclose(p1, p2, rtol=1e-12) and np.allclose(v1, v2, rtol=1e-12)
