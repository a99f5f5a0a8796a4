"""Kernels, reverse-mode gradients, and the optimizer.

Gradient correctness is judged against central finite differences computed
on float64 copies; nothing here trusts the tape to check the tape.
"""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nulog import numerics
from nulog.errors import ShapeError, StaleGradientError, ValidationError
from nulog.numerics import (OptimizerState, ParameterSet, Tensor, add,
                            concat_cols, cross_entropy, embedding,
                            finite_difference_check, first_row,
                            layer_norm_rows, matmul, mean_all, no_grad, relu,
                            scale, softmax_rows, sum_all, transpose,
                            optimizer_step)


def param_set(**arrays) -> ParameterSet:
    params = ParameterSet()
    for name, values in arrays.items():
        params.add(name, np.asarray(values, dtype=np.float64))
    return params


class TestTensorBasics:
    def test_default_dtype_is_float32(self):
        assert Tensor([[1, 2]]).data.dtype == np.float32

    def test_float64_preserved(self):
        assert Tensor(np.zeros((2, 2), dtype=np.float64)).data.dtype == np.float64

    def test_backward_requires_scalar(self):
        t = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ShapeError):
            add(t, t).backward()

    def test_backward_on_detached_value_rejected(self):
        with pytest.raises(ValidationError):
            Tensor(np.float32(3.0)).backward()


class TestKernelValues:
    def test_matmul_hand_example(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        assert matmul(a, b).data.tolist() == [[19.0, 22.0], [43.0, 50.0]]

    def test_matmul_identity(self):
        a = np.arange(6, dtype=np.float32).reshape(2, 3)
        out = matmul(Tensor(np.eye(2, dtype=np.float32)), Tensor(a))
        assert np.array_equal(out.data, a)

    def test_matmul_empty_contraction(self):
        out = matmul(Tensor(np.zeros((1, 0))), Tensor(np.zeros((0, 1))))
        assert out.data.shape == (1, 1)
        assert out.data[0, 0] == 0.0

    def test_matmul_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"2.*3|3.*2"):
            matmul(Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 3))))

    def test_matmul_2d_by_3d_rejected(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.zeros((2, 2))), Tensor(np.zeros((4, 2, 2))))

    def test_softmax_uniform_row(self):
        out = softmax_rows(Tensor([[3.0, 3.0, 3.0, 3.0]]))
        assert np.allclose(out.data, 0.25)

    def test_softmax_hand_example(self):
        out = softmax_rows(Tensor([[0.0, math.log(3.0)]]))
        assert np.allclose(out.data, [[0.25, 0.75]], atol=1e-6)

    def test_softmax_shift_invariance(self):
        row = np.array([[0.3, -1.2, 2.0, 0.0]], dtype=np.float32)
        plain = softmax_rows(Tensor(row)).data
        shifted = softmax_rows(Tensor(row + 1000.0)).data
        assert np.allclose(plain, shifted, atol=1e-6)

    def test_layer_norm_hand_example(self):
        out = layer_norm_rows(Tensor([[1.0, 3.0]]), Tensor([[1.0, 1.0]]),
                              Tensor([[0.0, 0.0]]))
        assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-4)

    def test_layer_norm_constant_row_is_bias(self):
        out = layer_norm_rows(Tensor([[5.0, 5.0, 5.0]]),
                              Tensor([[1.0, 1.0, 1.0]]),
                              Tensor([[2.0, 2.0, 2.0]]))
        assert np.allclose(out.data, 2.0, atol=1e-3)

    def test_layer_norm_width_mismatch(self):
        with pytest.raises(ShapeError):
            layer_norm_rows(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 2))),
                            Tensor(np.zeros((1, 2))))

    def test_relu(self):
        assert relu(Tensor([[-1.0, 2.0]])).data.tolist() == [[0.0, 2.0]]

    def test_cross_entropy_uniform_is_log_n(self):
        loss = cross_entropy(Tensor([[0.0] * 7]), np.array([3]))
        assert math.isclose(float(loss.data), math.log(7.0), rel_tol=1e-6)

    def test_cross_entropy_saturated_correct_is_near_zero(self):
        logits = np.zeros((1, 5), dtype=np.float32)
        logits[0, 2] = 1000.0
        assert float(cross_entropy(Tensor(logits), np.array([2])).data) < 1e-6

    def test_cross_entropy_target_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy(Tensor([[0.0, 1.0]]), np.array([5]))

    def test_cross_entropy_batch_is_mean_of_singles(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(4, 9)).astype(np.float64)
        targets = np.array([1, 0, 8, 3])
        batched = float(cross_entropy(Tensor(logits), targets).data)
        singles = [float(cross_entropy(Tensor(logits[i:i + 1]),
                                       targets[i:i + 1]).data)
                   for i in range(4)]
        assert math.isclose(batched, sum(singles) / 4, rel_tol=1e-9)

    @given(st.integers(min_value=1, max_value=6),
           st.integers(min_value=1, max_value=6),
           st.integers(min_value=0, max_value=2 ** 31 - 1))
    @settings(max_examples=60)
    def test_softmax_rows_sum_to_one(self, rows, cols, seed):
        rng = np.random.default_rng(seed)
        out = softmax_rows(Tensor(rng.normal(scale=5.0, size=(rows, cols))))
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)
        assert (out.data >= 0).all()


class TestBackwardHandDerived:
    def test_sum_gradient_is_ones(self):
        a = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3),
                   requires_grad=True)
        sum_all(a).backward()
        assert np.array_equal(a.grad, np.ones((2, 3)))

    def test_matmul_sum_gradient_is_transpose_rule(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        sum_all(matmul(a, b)).backward()
        ones = np.ones((3, 2))
        assert np.allclose(a.grad, ones @ b.data.T)
        assert np.allclose(b.grad, a.data.T @ ones)

    def test_grad_accumulates_across_uses(self):
        a = Tensor(np.ones((2, 2), dtype=np.float64), requires_grad=True)
        sum_all(add(a, a)).backward()
        assert np.allclose(a.grad, 2.0)

    def test_no_grad_blocks_taping(self):
        a = Tensor(np.ones((2, 2), dtype=np.float64), requires_grad=True)
        with no_grad():
            out = sum_all(matmul(a, a))
        assert out._parents == ()
        with pytest.raises(ValidationError):
            out.backward()


def fd_case(build, **arrays):
    """Assert analytic gradients of build(params) match finite differences."""
    params = param_set(**arrays)
    error = finite_difference_check(lambda: build(params), params)
    assert error <= 1e-3, f"finite-difference mismatch {error:.2e}"


class TestFiniteDifferences:
    def test_add_with_broadcast(self):
        rng = np.random.default_rng(1)
        fd_case(lambda p: sum_all(relu(add(p["a"], p["bias"]))),
                a=rng.normal(size=(3, 4)), bias=rng.normal(size=(1, 4)))

    def test_matmul_chain(self):
        rng = np.random.default_rng(2)
        fd_case(lambda p: mean_all(matmul(matmul(p["a"], p["b"]), p["c"])),
                a=rng.normal(size=(2, 3)), b=rng.normal(size=(3, 3)),
                c=rng.normal(size=(3, 2)))

    def test_batched_matmul_with_shared_weight(self):
        rng = np.random.default_rng(3)
        fd_case(lambda p: sum_all(matmul(p["x"], p["w"])),
                x=rng.normal(size=(2, 3, 4)), w=rng.normal(size=(4, 2)))

    def test_softmax_composition(self):
        rng = np.random.default_rng(4)
        fd_case(lambda p: sum_all(matmul(softmax_rows(p["s"]), p["v"])),
                s=rng.normal(size=(3, 3)), v=rng.normal(size=(3, 2)))

    def test_attention_shaped_composition(self):
        rng = np.random.default_rng(5)

        def build(p):
            q = matmul(p["x"], p["wq"])
            k = matmul(p["x"], p["wk"])
            v = matmul(p["x"], p["wv"])
            scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(2.0))
            return sum_all(matmul(softmax_rows(scores), v))

        fd_case(build, x=rng.normal(size=(4, 4)),
                wq=rng.normal(size=(4, 2)), wk=rng.normal(size=(4, 2)),
                wv=rng.normal(size=(4, 2)))

    def test_layer_norm_gradients(self):
        rng = np.random.default_rng(6)
        fd_case(lambda p: sum_all(matmul(
            layer_norm_rows(p["x"], p["gain"], p["bias"]), p["w"])),
            x=rng.normal(size=(3, 4)), gain=rng.normal(size=(1, 4)),
            bias=rng.normal(size=(1, 4)), w=rng.normal(size=(4, 2)))

    def test_embedding_with_repeated_ids(self):
        rng = np.random.default_rng(7)
        ids = np.array([[0, 2, 0, 1]])
        fd_case(lambda p: sum_all(relu(embedding(p["table"], ids))),
                table=rng.normal(size=(4, 3)))

    def test_concat_and_first_row(self):
        rng = np.random.default_rng(8)
        fd_case(lambda p: sum_all(first_row(concat_cols([p["a"], p["b"]]))),
                a=rng.normal(size=(1, 3, 2)), b=rng.normal(size=(1, 3, 2)))

    def test_cross_entropy_gradients(self):
        rng = np.random.default_rng(9)
        targets = np.array([2, 0])
        fd_case(lambda p: cross_entropy(matmul(p["x"], p["w"]), targets),
                x=rng.normal(size=(2, 3)), w=rng.normal(size=(3, 4)))

    def test_five_dim_random_composition(self):
        rng = np.random.default_rng(10)

        def build(p):
            h = relu(add(matmul(p["x"], p["w1"]), p["b1"]))
            h = layer_norm_rows(h, p["gain"], p["bias"])
            return cross_entropy(matmul(h, p["w2"]), np.array([1, 3]))

        fd_case(build, x=rng.normal(size=(2, 5)), w1=rng.normal(size=(5, 5)),
                b1=rng.normal(size=(1, 5)), gain=rng.normal(size=(1, 5)),
                bias=rng.normal(size=(1, 5)), w2=rng.normal(size=(5, 5)))


class TestEmbeddingScatter:
    def test_repeated_ids_accumulate(self):
        table = Tensor(np.zeros((3, 2), dtype=np.float64), requires_grad=True)
        ids = np.array([[1, 1, 1]])
        sum_all(embedding(table, ids)).backward()
        assert np.allclose(table.grad[1], 3.0)
        assert np.allclose(table.grad[0], 0.0)

    def test_out_of_range_id_rejected(self):
        with pytest.raises(IndexError):
            embedding(Tensor(np.zeros((3, 2))), np.array([[7]]))


class TestParameterSet:
    def test_duplicate_name_rejected(self):
        params = ParameterSet()
        params.add("w", np.zeros((1, 1), dtype=np.float32))
        with pytest.raises(ValidationError):
            params.add("w", np.zeros((1, 1), dtype=np.float32))

    def test_order_preserved(self):
        params = ParameterSet()
        for name in ("c", "a", "b"):
            params.add(name, np.zeros((1, 1), dtype=np.float32))
        assert params.names() == ["c", "a", "b"]


class TestOptimizer:
    def test_zero_gradient_means_no_motion(self):
        params = param_set(w=np.array([[1.0, -2.0]]))
        state = OptimizerState(params)
        params["w"].grad = np.zeros((1, 2))
        optimizer_step(params, state)
        assert np.allclose(params["w"].data, [[1.0, -2.0]])

    def test_first_step_magnitude_is_learning_rate(self):
        # with bias correction the first update is lr * g / (|g| + eps)
        params = param_set(w=np.array([[0.5, -0.5, 2.0]]))
        state = OptimizerState(params, learning_rate=1e-3)
        params["w"].grad = np.array([[0.3, -0.7, 0.001]])
        before = params["w"].data.copy()
        optimizer_step(params, state)
        step = params["w"].data - before
        assert np.allclose(np.abs(step), 1e-3, rtol=1e-4)
        assert np.all(np.sign(step) == -np.sign([[0.3, -0.7, 0.001]]))

    def test_stale_gradient_rejected(self):
        params = param_set(w=np.array([[1.0]]))
        state = OptimizerState(params)
        params["w"].grad = np.array([[1.0]])
        optimizer_step(params, state)
        with pytest.raises(StaleGradientError):
            optimizer_step(params, state)

    def test_quadratic_bowl_converges(self):
        params = param_set(theta=np.array([[3.0]]))
        state = OptimizerState(params, learning_rate=0.05)
        history = []
        for _ in range(200):
            loss = sum_all(matmul(params["theta"],
                                  transpose(params["theta"])))
            params.zero_grad()
            loss.backward()
            optimizer_step(params, state)
            history.append(abs(float(params["theta"].data[0, 0])))
        window = history[5:100]
        assert all(b <= a + 1e-12 for a, b in zip(window, window[1:]))
        assert history[-1] < 0.01

    def test_defaults_match_contract(self):
        state = OptimizerState(param_set(w=np.zeros((1, 1))))
        assert (state.learning_rate, state.beta1, state.beta2, state.eps) == \
            (1e-3, 0.9, 0.999, 1e-8)
