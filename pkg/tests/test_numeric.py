import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fend.numeric import (DimensionError, NumericError, grad_check, layer_norm, matmul, tensor)


def triple_loop(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return out


def test_matmul_identity_and_projection():
    x = tensor([[1.0, 2.0], [3.0, 4.0]])
    assert torch.equal(matmul(torch.eye(2, dtype=torch.float64), x), x)
    p = matmul(tensor([[1.0, 0.0], [0.0, 0.0]]), tensor([[5.0], [7.0]]))
    assert p.tolist() == [[5.0], [0.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    got = matmul(tensor(a), tensor(b)).numpy()
    np.testing.assert_allclose(got, triple_loop(a.tolist(), b.tolist()), atol=1e-12, rtol=0)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))


def test_matmul_associative_chain():
    rng = np.random.default_rng(1)
    mats = [rng.normal(size=(5, 5)) for _ in range(4)]
    left = tensor(mats[0])
    for m in mats[1:]:
        left = matmul(left, tensor(m))
    right = tensor(mats[-1])
    for m in reversed(mats[:-1]):
        right = matmul(tensor(m), right)
    oracle = mats[0].tolist()
    for m in mats[1:]:
        oracle = triple_loop(oracle, m.tolist())
    np.testing.assert_allclose(left.numpy(), oracle, atol=1e-10)
    np.testing.assert_allclose(right.numpy(), oracle, atol=1e-10)


def test_matmul_gradient_flows_to_both():
    a = tensor(np.ones((2, 3)), requires_grad=True)
    b = tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    matmul(a, b).sum().backward()
    assert a.grad is not None and b.grad is not None
    assert a.grad.abs().sum() > 0 and b.grad.abs().sum() > 0


def test_layer_norm_examples():
    assert layer_norm(tensor([1.0, 1.0, 1.0, 1.0])).tolist() == [0.0] * 4
    out = layer_norm(tensor([1.0, -1.0])).numpy()
    s = 1.0 / math.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(out, [s, -s], atol=1e-15)
    assert layer_norm(torch.zeros(6, dtype=torch.float64)).abs().max() == 0.0


def test_layer_norm_moments():
    x = tensor(np.random.default_rng(3).normal(size=8) * 4 + 2)
    out = layer_norm(x).numpy()
    assert abs(out.mean()) < 1e-12
    assert 1 - 1e-4 <= out.var() <= 1.0


def test_layer_norm_too_short():
    with pytest.raises(DimensionError):
        layer_norm(tensor([3.0]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-50, 50)), st.floats(-100, 100), st.floats(0.5, 20))
def test_layer_norm_shift_scale_invariance(x, shift, scale):
    if x.std() < 1.0:
        return
    base = layer_norm(tensor(x)).numpy()
    np.testing.assert_allclose(layer_norm(tensor(x + shift)).numpy(), base, atol=1e-9)
    np.testing.assert_allclose(layer_norm(tensor(x * scale)).numpy(), base, atol=1e-4)


def test_grad_check_quadratic():
    x = tensor([3.0], requires_grad=True)
    assert grad_check(lambda: (x * x).sum(), [x], step=1e-4) < 1e-8


def test_grad_check_layer_norm_composite():
    rng = np.random.default_rng(4)
    x = tensor(rng.normal(size=(3, 7)), requires_grad=True)
    w = tensor(rng.normal(size=(7, 7)), requires_grad=True)
    t = tensor(rng.normal(size=(3, 7)))
    assert grad_check(lambda: ((layer_norm(matmul(x, w)) - t) ** 2).sum(), [x, w]) < 1e-4


def test_grad_check_unused_parameter_has_zero_gradient():
    x = tensor([1.0, 2.0], requires_grad=True)
    unused = tensor([5.0], requires_grad=True)
    assert grad_check(lambda: (x ** 3).sum(), [x, unused]) < 1e-6


def test_grad_check_reused_tensor_accumulates():
    w = tensor(np.random.default_rng(5).normal(size=(4, 4)) * 0.3, requires_grad=True)
    h0 = tensor(np.ones(4))

    def f():
        h = h0
        for _ in range(5):
            h = torch.tanh(matmul(w, h))
        return h.sum()

    assert grad_check(f, [w]) < 1e-4


def test_grad_check_non_finite():
    x = tensor([0.0], requires_grad=True)
    with pytest.raises(NumericError):
        grad_check(lambda: (1.0 / x).sum(), [x])
