import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockdrop import tensor as T
from blockdrop.exceptions import ContractError, DimensionError, DomainError
from blockdrop.tensor import Tensor

from oracles import leaf, max_rel_error

SEEDS = range(5)


def test_matmul_identity_and_hand_value():
    X = np.arange(9.0).reshape(3, 3)
    assert np.array_equal((Tensor(np.eye(3)) @ Tensor(X)).data, X)
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[0.0], [1.0]])
    assert np.array_equal(out.data, [[2.0], [4.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_grad_of_sum_matmul_is_ones_bt():
    rng = np.random.default_rng(0)
    A, B = leaf(rng, 3, 4), leaf(rng, 4, 5)
    (A @ B).sum().backward()
    assert np.allclose(A.grad, np.ones((3, 5)) @ B.data.T)
    assert np.allclose(B.grad, A.data.T @ np.ones((3, 5)))


def test_elementwise_values():
    assert T.relu(Tensor(-1.0)).item() == 0.0
    assert T.relu(Tensor(2.0)).item() == 2.0
    assert T.gelu(Tensor(0.0)).item() == 0.0
    x = Tensor(3.0, requires_grad=True)
    T.relu(x).backward()
    assert x.grad == 1.0


def test_gelu_is_tanh_approximation():
    x = np.linspace(-4, 4, 17)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + T.GELU_COEF * x ** 3)))
    assert np.allclose(T.gelu(Tensor(x)).data, ref, atol=1e-15)


def test_log_domain_error():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        T.log(Tensor([-1.0]))


def test_only_leading_broadcast():
    a = Tensor(np.ones((2, 3, 4)))
    assert (a + Tensor(np.ones(4))).shape == (2, 3, 4)
    assert (a + Tensor(np.ones((3, 4)))).shape == (2, 3, 4)
    with pytest.raises(DimensionError):
        a + Tensor(np.ones((2, 1, 4)))
    with pytest.raises(DimensionError):
        a + Tensor(np.ones(3))


def test_softmax_cases():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3)
    big = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and np.allclose(big, [1.0, 0.0])
    rows = T.softmax(Tensor(np.random.default_rng(0).normal(size=(5, 7)) * 30), axis=-1).data
    assert np.all(np.abs(rows.sum(-1) - 1) < 1e-12)


def test_layer_norm_cases():
    g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert np.allclose(T.layer_norm(Tensor(np.full((2, 4), 3.0)), g, b).data, 0.0)
    x = Tensor(np.random.default_rng(0).normal(size=(6, 4)) * 5 + 2)
    out = T.layer_norm(x, g, b).data
    assert np.all(np.abs(out.mean(-1)) < 1e-10)
    assert T.LAYER_NORM_EPS == 1e-5


def test_backward_contracts():
    x = Tensor(np.arange(3.0), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones(3))
    x.zero_grad()
    T.square(x).sum().backward()
    assert np.array_equal(x.grad, 2 * x.data)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_accumulates_and_replays_identically():
    rng = np.random.default_rng(3)
    x = leaf(rng, 4, 3)
    w = leaf(rng, 3, 2)

    def loss():
        return T.gelu(x @ w).square().mean()

    loss().backward()
    first = x.grad.copy()
    loss().backward()
    assert np.allclose(x.grad, 2 * first)
    x.zero_grad()
    loss().backward()
    assert np.array_equal(x.grad, first)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_forward_bit_identical():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(8, 16)), rng.normal(size=(16, 4))
    r1 = T.softmax(T.gelu(Tensor(a) @ Tensor(b))).data
    r2 = T.softmax(T.gelu(Tensor(a) @ Tensor(b))).data
    assert r1.tobytes() == r2.tobytes()


def test_float32_is_preserved():
    x = Tensor(np.ones((2, 3), dtype=np.float32))
    y = T.gelu(x * 2.0 + 1.0) @ Tensor(np.ones((3, 2), dtype=np.float32))
    assert y.data.dtype == np.float32


# ---------------------------------------------------------------------
# finite-difference checks for every differentiable op
# ---------------------------------------------------------------------
def _ops(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
    v = leaf(rng, 4)
    pos = leaf(rng, 3, 4, low=0.5)
    m1, m2 = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    bm = leaf(rng, 2, 4, 3)
    g, bias = leaf(rng, 4), leaf(rng, 4)
    w = Tensor(rng.normal(size=(3, 4)))
    w3 = Tensor(rng.normal(size=(3, 4, 2)))
    c = Tensor(rng.normal(size=(3, 2)))
    return {
        "add": (lambda: ((a + v) * w).sum(), [a, v]),
        "sub": (lambda: ((a - b) * w).sum(), [a, b]),
        "mul": (lambda: (a * b * w).sum(), [a, b]),
        "div": (lambda: ((a / pos) * w).sum(), [a, pos]),
        "neg": (lambda: ((-a) * w).sum(), [a]),
        "maximum": (lambda: (T.maximum(a, b) * w).sum(), [a, b]),
        "minimum": (lambda: (T.minimum(a, b) * w).sum(), [a, b]),
        "relu": (lambda: (T.relu(a) * w).sum(), [a]),
        "gelu": (lambda: (T.gelu(a) * w).sum(), [a]),
        "exp": (lambda: (T.exp(a) * w).sum(), [a]),
        "log": (lambda: (T.log(pos) * w).sum(), [pos]),
        "square": (lambda: (T.square(a) * w).sum(), [a]),
        "softplus": (lambda: (T.softplus(a) * w).sum(), [a]),
        "sum_axis": (lambda: (T.tsum(a, axis=0) * v).sum(), [a]),
        "mean_axis": (lambda: (T.mean(a, axis=0) * v).sum(), [a]),
        "mean_keepdims": (lambda: (T.mean(a, axis=-1, keepdims=True) * Tensor(np.arange(3.0)[:, None])).sum(), [a]),
        "reshape": (lambda: (a.reshape(4, 3) @ c).square().sum(), [a]),
        "transpose": (lambda: (a.transpose(1, 0) @ c).square().sum(), [a]),
        "getitem": (lambda: (a[1:, ::2] * a[1:, ::2]).sum(), [a]),
        "stack_last": (lambda: (T.stack_last([a, b]) * w3).sum(), [a, b]),
        "matmul_2d": (lambda: ((m1 @ m2) * Tensor(np.ones((2, 3, 5)))).square().sum(), [m1, m2]),
        "matmul_batched": (lambda: (m1 @ bm).square().sum(), [m1, bm]),
        "softmax": (lambda: (T.softmax(a, axis=-1) * w).sum(), [a]),
        "log_softmax": (lambda: (T.log_softmax(a, axis=-1) * w).sum(), [a]),
        "layer_norm": (lambda: (T.layer_norm(a, g, bias) * w).sum(), [a, g, bias]),
    }


@pytest.mark.parametrize("name", sorted(_ops(np.random.default_rng(0))))
def test_op_gradients_match_finite_differences(name):
    for seed in SEEDS:
        f, params = _ops(np.random.default_rng(seed))[name]
        assert max_rel_error(f, params) < 1e-4, (name, seed)


def test_mlp_gradients():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(5, 4)))
    ws = [leaf(rng, 4, 6), leaf(rng, 6, 6), leaf(rng, 6, 1)]

    def f():
        h = T.gelu(x @ ws[0])
        h = T.relu(h @ ws[1])
        return T.square(h @ ws[2]).mean()

    assert max_rel_error(f, ws) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(values):
    out = T.softmax(Tensor(np.array(values))).data
    assert abs(out.sum() - 1) < 1e-12 and np.all(out >= 0)


def test_division_by_zero_is_domain_error():
    with pytest.raises(DomainError):
        Tensor([1.0]) / Tensor([0.0])
