"""Autodiff core: forward oracles and finite-difference gradient checks."""

from __future__ import annotations

import numpy as np
import pytest

from vwseg import tensor as T
from vwseg.errors import (
    ConfigError,
    NonFinite,
    NotScalarLoss,
    ShapeMismatch,
    ZeroNormRow,
)


def t64(arr, rg=True):
    return T.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=rg, dtype=np.float64)


def conv2d_reference(x, k):
    """Direct-summation same-padded correlation, loops only."""
    H, W, cin = x.shape
    kh, kw, _, cout = k.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((H, W, cout), dtype=np.float64)
    for i in range(H):
        for j in range(W):
            for u in range(kh):
                for v in range(kw):
                    ii, jj = i + u - ph, j + v - pw
                    if 0 <= ii < H and 0 <= jj < W:
                        for c in range(cin):
                            out[i, j] += x[ii, jj, c] * k[u, v, c]
    return out


def test_add_mul_matmul_forward():
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = T.Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert np.allclose(T.add(a, b).data, [[6, 8], [10, 12]])
    assert np.allclose(T.mul(a, b).data, [[5, 12], [21, 32]])
    assert np.allclose(T.matmul(a, b).data, np.array([[1, 2], [3, 4]]) @ np.array([[5, 6], [7, 8]]))
    assert np.allclose(T.mul_scalar(a, -2.0).data, [[-2, -4], [-6, -8]])


def test_primitives_are_pure():
    rng = np.random.default_rng(0)
    a = T.Tensor(rng.normal(size=(4, 5)))
    b = T.Tensor(rng.normal(size=(5, 3)))
    first = T.matmul(a, b).data
    for _ in range(5):
        assert np.array_equal(T.matmul(a, b).data, first)


def test_relu_subgradient_zero_at_zero():
    x = t64([-1.0, 0.0, 2.0])
    with T.Tape() as tape:
        y = T.reduce_sum(T.relu(x))
        T.backward(tape, y)
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])


def test_matmul_shape_mismatch():
    a = T.Tensor(np.ones((2, 3)))
    b = T.Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeMismatch):
        T.matmul(a, b)


def test_nonfinite_detected():
    a = T.Tensor([1.0, 0.0])
    with pytest.raises(NonFinite):
        T.div(T.Tensor([1.0, 1.0]), a)
    with pytest.raises(NonFinite):
        T.log(T.Tensor([0.0, 1.0]))


def test_backward_requires_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = T.mul_scalar(x, 2.0)
        with pytest.raises(NotScalarLoss):
            T.backward(tape, y)


def test_loss_independent_of_parameter_gives_zero_grad():
    p = t64([1.0, 2.0])
    q = t64([3.0])

    def fn(p, q):
        return T.reduce_sum(T.mul(q, q))

    err = T.grad_check(fn, [p, q])
    assert err < 1e-6
    assert np.array_equal(p.grad, [0.0, 0.0])


def test_grad_check_quadratic_tight():
    # sum of squares: analytic 2x, eps=1e-3 central differences are exact
    # up to float64 roundoff
    x = t64([0.3, -1.2, 2.5])

    def fn(x):
        return T.reduce_sum(T.mul(x, x))

    assert T.grad_check(fn, [x], eps=1e-3) < 1e-6


def test_grad_check_eps_bounds():
    x = t64([1.0])
    with pytest.raises(ConfigError):
        T.grad_check(lambda x: T.reduce_sum(x), [x], eps=1e-6)
    with pytest.raises(ConfigError):
        T.grad_check(lambda x: T.reduce_sum(x), [x], eps=0.1)


def test_conv2d_matches_direct_summation():
    rng = np.random.default_rng(7)
    for kh, kw, cin, cout in [(3, 3, 3, 4), (1, 1, 5, 2), (3, 5, 2, 3)]:
        x = rng.normal(size=(8, 9, cin))
        k = rng.normal(size=(kh, kw, cin, cout))
        got = T.conv2d(T.Tensor(x, dtype=np.float64), T.Tensor(k, dtype=np.float64)).data
        want = conv2d_reference(x, k)
        assert np.allclose(got, want, atol=1e-12)


def test_conv2d_rejects_even_kernel():
    with pytest.raises(ShapeMismatch):
        T.conv2d(T.Tensor(np.ones((5, 5, 1))), T.Tensor(np.ones((2, 3, 1, 1))))


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 7, 2))
    k = np.zeros((3, 3, 2, 2))
    k[1, 1, 0, 0] = 1.0
    k[1, 1, 1, 1] = 1.0
    out = T.conv2d(T.Tensor(x, dtype=np.float64), T.Tensor(k, dtype=np.float64)).data
    assert np.allclose(out, x)


@pytest.mark.parametrize("seed", range(4))
def test_gradients_against_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = t64(rng.normal(size=(3, 4)))
    b = t64(rng.normal(size=(4, 2)))
    c = t64(rng.normal(size=(3, 2)))

    def fn(a, b, c):
        h = T.matmul(a, b)
        h = T.relu(T.add(h, c))
        h = T.exp(T.mul_scalar(h, 0.5))
        return T.reduce_mean(h)

    assert T.grad_check(fn, [a, b, c], eps=1e-4) < 1e-6


def test_conv2d_grad_matches_fd():
    rng = np.random.default_rng(11)
    x = t64(rng.normal(size=(5, 6, 2)))
    k = t64(rng.normal(size=(3, 3, 2, 3)) * 0.5)

    def fn(x, k):
        return T.reduce_mean(T.relu(T.conv2d(x, k)))

    assert T.grad_check(fn, [x, k], eps=1e-4) < 1e-6


def test_softmax_log_take_grads():
    rng = np.random.default_rng(5)
    x = t64(rng.normal(size=(6, 4)))
    labels = rng.integers(0, 4, size=6)

    def fn(x):
        p = T.softmax_rows(x)
        picked = T.take_per_row(p, labels)
        return T.neg(T.reduce_mean(T.log(picked)))

    assert T.grad_check(fn, [x], eps=1e-4) < 1e-6


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(9)
    x = T.Tensor(rng.normal(size=(10, 7)))
    p = T.softmax_rows(x).data
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_gather_and_concat_and_slice_grads():
    rng = np.random.default_rng(13)
    x = t64(rng.normal(size=(5, 3)))
    idx = np.array([0, 2, 2, 4])

    def fn(x):
        g = T.gather_rows(x, idx)
        both = T.concat([g, g], axis=0)
        part = T.slice_(both, (slice(1, 7), slice(0, 2)))
        return T.reduce_sum(T.mul(part, part))

    assert T.grad_check(fn, [x], eps=1e-4) < 1e-6


def test_reshape_reduce_sum_axis_grads():
    rng = np.random.default_rng(17)
    x = t64(rng.normal(size=(4, 6)))

    def fn(x):
        r = T.reshape(x, (2, 12))
        s = T.reduce_sum(r, axis=0)
        return T.reduce_mean(T.mul(s, s))

    assert T.grad_check(fn, [x], eps=1e-4) < 1e-6


def test_colgroup_max_forward_and_ties():
    x = T.Tensor(np.array([[1.0, 3.0, 3.0, 0.0], [2.0, 1.0, 5.0, 7.0]]))
    groups = np.array([0, 0, 1, 1])
    out = T.colgroup_max(x, groups, 2)
    assert np.allclose(out.data, [[3.0, 3.0], [2.0, 7.0]])
    # tie in row 0 group 0: gradient goes to the lower column index
    xt = t64(np.array([[1.0, 3.0, 3.0, 0.0]]))
    with T.Tape() as tape:
        y = T.reduce_sum(T.colgroup_max(xt, np.array([0, 0, 0, 1]), 2))
        T.backward(tape, y)
    assert np.array_equal(xt.grad, [[0.0, 1.0, 0.0, 1.0]])


def test_colgroup_max_grad_matches_fd():
    rng = np.random.default_rng(19)
    x = t64(rng.normal(size=(5, 6)))
    groups = np.array([0, 1, 1, 2, 0, 2])

    def fn(x):
        m = T.colgroup_max(x, groups, 3)
        return T.reduce_mean(T.mul(m, m))

    assert T.grad_check(fn, [x], eps=1e-4) < 1e-6


def test_cosine_rows_forward_range_and_symmetry():
    rng = np.random.default_rng(23)
    a = T.Tensor(rng.normal(size=(6, 5)))
    b = T.Tensor(rng.normal(size=(4, 5)))
    ab = T.cosine_rows(a, b).data
    ba = T.cosine_rows(b, a).data
    assert ab.min() >= -1 - 1e-6 and ab.max() <= 1 + 1e-6
    assert np.allclose(ab, ba.T, atol=1e-6)
    unit = T.Tensor(np.array([[3.0, 0.0], [0.0, 2.0]]))
    assert np.allclose(T.cosine_rows(unit, unit).data, np.eye(2), atol=1e-7)


def test_cosine_rows_zero_norm_raises():
    a = T.Tensor(np.array([[0.0, 0.0], [1.0, 0.0]]))
    b = T.Tensor(np.ones((2, 2)))
    with pytest.raises(ZeroNormRow):
        T.cosine_rows(a, b)


def test_cosine_rows_grad_matches_fd():
    rng = np.random.default_rng(29)
    a = t64(rng.normal(size=(4, 3)) + 0.5)
    b = t64(rng.normal(size=(3, 3)) - 0.2)
    w = rng.normal(size=(4, 3))

    def fn(a, b):
        c = T.cosine_rows(a, b)
        return T.reduce_sum(T.mul(c, T.Tensor(w, dtype=np.float64)))

    assert T.grad_check(fn, [a, b], eps=1e-4) < 1e-6


def test_div_broadcast_grad():
    rng = np.random.default_rng(31)
    a = t64(rng.normal(size=(4, 3)))
    b = t64(np.abs(rng.normal(size=(4, 1))) + 1.0)

    def fn(a, b):
        return T.reduce_mean(T.div(a, b))

    assert T.grad_check(fn, [a, b], eps=1e-4) < 1e-6


def test_tape_node_ordering_and_single_touch():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = T.mul_scalar(x, 2.0)
        z = T.add(y, y)
        loss = T.reduce_sum(z)
        ids = [id(n.out) for n in tape.entries]
        assert ids.index(id(y)) < ids.index(id(z))
        T.backward(tape, loss)
    # y feeds z twice: accumulation happens before y's node replays
    assert np.array_equal(x.grad, [4.0, 4.0, 4.0])


def test_value_reused_across_two_branches():
    x = t64([1.5, -0.5])

    def fn(x):
        y = T.mul(x, x)
        return T.reduce_sum(T.add(y, T.mul_scalar(y, 3.0)))

    assert T.grad_check(fn, [x], eps=1e-4) < 1e-6


def test_apply_primitive_dispatch():
    a = T.Tensor([1.0, 2.0])
    out = T.apply_primitive("mul_scalar", a, 3.0)
    assert np.allclose(out.data, [3.0, 6.0])
    with pytest.raises(ConfigError):
        T.apply_primitive("no_such_op", a)


def test_no_recording_without_tape():
    x = T.Tensor(np.ones(3), requires_grad=True)
    y = T.mul_scalar(x, 2.0)
    assert y.requires_grad is False


def test_float32_default_dtype():
    x = T.Tensor([1.0, 2.0])
    assert x.data.dtype == np.float32
    y = T.Tensor(np.array([1.0], dtype=np.float64))
    assert y.data.dtype == np.float64
