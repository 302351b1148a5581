import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hybridseq import tensor as T
from hybridseq.errors import ContractError, ShapeError
from hybridseq.tensor import Tensor


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def two_pass_layer_norm(x, eps):
    out = np.zeros_like(x)
    for r in range(x.shape[0]):
        row = x[r]
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        out[r] = [(v - mu) / math.sqrt(var + eps) for v in row]
    return out


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_selector_row(self):
        np.testing.assert_array_equal((Tensor([[1, 0]]) @ Tensor([[5], [7]])).data, [[5]])

    def test_random_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, naive_matmul(a, b), rtol=1e-5, atol=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
    def test_random_shapes(self, m, k, n, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
        ref = naive_matmul(a.astype(np.float32).astype(float), b.astype(np.float32).astype(float))
        out = (Tensor(a) @ Tensor(b)).data
        np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)

    def test_shape_mismatch_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 2)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor([0, 0, 0, 0])).data, [0.25] * 4)

    def test_closed_form(self):
        np.testing.assert_allclose(T.softmax(Tensor([0, math.log(3)])).data, [0.25, 0.75], rtol=1e-6)

    def test_no_overflow(self):
        out = T.softmax(Tensor([1000, 1000])).data
        np.testing.assert_array_equal(out, [0.5, 0.5])

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 9)),
                  elements=st.floats(-1e4, 1e4)))
    def test_rows_sum_to_one(self, x):
        out = T.softmax(Tensor(x), axis=-1).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


class TestLayerNorm:
    def test_constant_collapses_to_bias(self):
        out = T.layer_norm(Tensor([3.0, 3.0, 3.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, np.zeros(3))

    def test_already_normalized(self):
        out = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [1.0, -1.0], rtol=1e-6)

    def test_two_pass_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 7)) * 3 + 1
        out = T.layer_norm(Tensor(x), Tensor(np.ones(7)), Tensor(np.zeros(7)), eps=1e-5).data
        np.testing.assert_allclose(out, two_pass_layer_norm(x, 1e-5), atol=1e-5)
        np.testing.assert_allclose(out.mean(-1), 0, atol=1e-5)
        np.testing.assert_allclose(out.var(-1), 1, atol=1e-4)


class TestCrossEntropy:
    def test_uniform(self):
        loss = T.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3])
        assert loss.item() == pytest.approx(math.log(4), abs=1e-6)

    def test_saturated(self):
        logits = np.zeros((1, 5))
        logits[0, 2] = 1e4
        assert T.cross_entropy(Tensor(logits), [2]).item() == pytest.approx(0.0, abs=1e-6)

    def test_all_ignored_is_zero_with_zero_grad(self):
        logits = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
        loss = T.cross_entropy(logits, [0, 0, 0], ignore_id=0)
        assert loss.item() == 0.0
        loss.backward()
        np.testing.assert_array_equal(logits.grad, np.zeros((3, 4)))

    def test_ignored_positions_excluded(self):
        logits = np.random.default_rng(1).standard_normal((3, 4))
        full = T.cross_entropy(Tensor(logits), [1, 2, 0], ignore_id=0).item()
        part = T.cross_entropy(Tensor(logits[:2]), [1, 2]).item()
        assert full == pytest.approx(part, rel=1e-6)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy(Tensor(np.zeros((2, 4))), [1, 4])


class TestBackward:
    def test_sum(self):
        w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        w.sum().backward()
        np.testing.assert_array_equal(w.grad, np.ones(3))

    def test_square(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        (w * w).sum().backward()
        np.testing.assert_array_equal(w.grad, [2.0, 4.0])

    def test_twice_accumulates(self):
        rng = np.random.default_rng(0)
        w = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        loss = T.tanh(w @ w).sum()
        loss.backward()
        once = w.grad.copy()
        loss.backward()
        np.testing.assert_allclose(w.grad, 2 * once, rtol=1e-6)

    def test_non_scalar_rejected(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            (w * 2.0).backward()

    def test_shared_subexpression(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x
        (y + y).sum().backward()
        np.testing.assert_allclose(x.grad, [12.0])


class TestBroadcastRule:
    def test_leading_axis_expansion_allowed(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        (a + b).sum().backward()
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])

    def test_other_broadcasts_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((2, 1)))


OPS = {
    "add": lambda a, b: (a + b).sum(),
    "sub": lambda a, b: (a - b * b).sum(),
    "mul": lambda a, b: (a * b).sum(),
    "div": lambda a, b: (a / (b * b + 1.0)).sum(),
    "matmul": lambda a, b: (a @ T.transpose(b)).sum(),
    "batched_matmul": lambda a, b: T.matmul(T.reshape(a, (1, 3, 4)), T.reshape(T.transpose(b), (1, 4, 3))).sum(),
    "exp": lambda a, b: T.exp(a * 0.5).sum(),
    "log": lambda a, b: T.log(a * a + 1.0).sum(),
    "tanh": lambda a, b: (T.tanh(a) * b).sum(),
    "sigmoid": lambda a, b: (T.sigmoid(a) * b).sum(),
    "relu": lambda a, b: (T.relu(a) * b).sum(),
    "softmax": lambda a, b: (T.softmax(a, axis=-1) * b).sum(),
    "log_softmax": lambda a, b: (T.log_softmax(a, axis=0) * b).sum(),
    "layer_norm": lambda a, b: (T.layer_norm(a, b[0], b[1]) * a).sum(),
    "cross_entropy": lambda a, b: T.cross_entropy(a + b, [1, 0, 3], ignore_id=0, smoothing=0.1),
    "mean": lambda a, b: (a.mean(axis=0) * b[0]).sum(),
    "getitem": lambda a, b: (a[1:, ::2] * b[:2, 1:3]).sum() + a[np.array([0, 0, 2]), 1].sum(),
    "concat_stack": lambda a, b: (T.stack([a, b], axis=1) * T.concat([b, a], axis=0).reshape(3, 2, 4)).sum(),
    "masked_fill": lambda a, b: (T.softmax(T.masked_fill(a, np.eye(3, 4, dtype=bool), -np.inf)) * b).sum(),
    "broadcast_to": lambda a, b: (T.broadcast_to(a.reshape(3, 1, 4), (3, 2, 4)) * T.stack([b, b], 1)).sum(),
    "embedding": lambda a, b: (T.embedding(a, [[0, 2], [2, 1]]) * b[:2]).sum(),
    "swapaxes": lambda a, b: (T.swapaxes(a, 0, 1) @ b).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(3))
def test_op_gradients(name, seed):
    rng = np.random.default_rng(seed)
    with T.float64_mode():
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        if name == "layer_norm":
            b = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
        if name == "relu":
            a.data[np.abs(a.data) < 0.05] += 0.2
    assert T.gradcheck(lambda: OPS[name](a, b), [a, b])


def test_gradcheck_requires_float64():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        T.gradcheck(lambda: a.sum(), [a])


def test_no_grad_records_nothing():
    w = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = w * 2.0
    assert not y.requires_grad


def test_float32_default():
    assert Tensor([1.0]).dtype == np.float32
    with T.float64_mode():
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
