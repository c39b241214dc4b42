import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import naive_conv, naive_matmul
from thinner import tensor as T
from thinner.errors import ShapeError


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, np.eye(2)), a)


def test_matmul_hand():
    a = np.array([[1.0, 0.0], [0.0, 0.0]])
    b = np.array([[0.0, 1.0], [5.0, 5.0]])
    np.testing.assert_array_equal(T.matmul(a, b), [[0.0, 1.0], [0.0, 0.0]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(T.matmul(a, b), naive_matmul(a, b), atol=1e-10)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_conv_scalar_filter():
    out = T.conv2d_forward(np.ones((1, 3, 3)), np.full((1, 1, 1, 1), 2.0))
    np.testing.assert_array_equal(out, np.full((1, 3, 3), 2.0))


def test_conv_zero_filter(rng):
    out = T.conv2d_forward(rng.normal(size=(2, 5, 5)), np.zeros((3, 2, 3, 3)), 1, 1)
    assert out.shape == (3, 5, 5)
    assert not out.any()


def test_conv_matches_nested_loops(rng):
    x, f = rng.normal(size=(2, 8, 8)), rng.normal(size=(3, 2, 3, 3))
    np.testing.assert_allclose(T.conv2d_forward(x, f), naive_conv(x, f, 1, 0), atol=1e-10)


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 0, 3), (2, 1, 2), (3, 2, 4), (1, 0, 1)])
def test_conv_strides_and_padding(rng, stride, pad, k):
    for _ in range(5):
        x = rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(k, 9)), int(rng.integers(k, 9))))
        f = rng.normal(size=(int(rng.integers(1, 4)), x.shape[0], k, k))
        np.testing.assert_allclose(T.conv2d_forward(x, f, stride, pad),
                                   naive_conv(x, f, stride, pad), atol=1e-10)


def test_conv_batched_equals_per_sample(rng):
    x, f = rng.normal(size=(4, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3))
    batch = T.conv2d_forward(x, f, 1, 1)
    for b in range(4):
        np.testing.assert_allclose(batch[b], naive_conv(x[b], f, 1, 1), atol=1e-10)


def test_conv_kernel_larger_than_padded_input():
    with pytest.raises(ShapeError, match="kernel"):
        T.conv2d_forward(np.zeros((1, 2, 2)), np.zeros((1, 1, 5, 5)), 1, 1)


def test_col2im_is_adjoint_of_im2col(rng):
    # <im2col(x), c> == <x, col2im(c)> for every x, c
    for stride, pad in [(1, 0), (1, 1), (2, 1), (3, 0)]:
        x = rng.normal(size=(2, 3, 7, 7))
        cols = T.im2col(x, 3, 3, stride, pad)
        c = rng.normal(size=cols.shape)
        lhs = np.sum(cols * c)
        rhs = np.sum(x * T.col2im(c, x.shape, 3, 3, stride, pad))
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def test_im2col_matches_loop(rng):
    x = rng.normal(size=(2, 2, 5, 5))
    cols = T.im2col(x, 3, 3, 2, 1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    row = 0
    for b in range(2):
        for y in range(3):
            for z in range(3):
                expected = xp[b, :, 2 * y:2 * y + 3, 2 * z:2 * z + 3].ravel()
                np.testing.assert_array_equal(cols[row], expected)
                row += 1


def test_reduce_mean_spatial_constant():
    assert T.reduce_mean_spatial(np.full((1, 4, 4), 5.0))[0] == 5.0


def test_reduce_mean_spatial_hand():
    np.testing.assert_array_equal(T.reduce_mean_spatial(np.array([[[1.0, 2.0], [3.0, 4.0]]])), [2.5])


def test_reduce_mean_spatial_loop(rng):
    x = rng.normal(size=(4, 5, 5))
    expected = [sum(x[c, i, j] for i in range(5) for j in range(5)) / 25 for c in range(4)]
    np.testing.assert_allclose(T.reduce_mean_spatial(x), expected, atol=1e-12)


def test_reduce_mean_spatial_rank_error():
    with pytest.raises(ShapeError, match="rank-3"):
        T.reduce_mean_spatial(np.zeros((2, 2)))


def test_elementwise_and_transpose_loops(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    s, p, t = T.add(a, b), T.mul(a, b), T.transpose(a)
    for i in range(3):
        for j in range(4):
            assert abs(s[i, j] - (a[i, j] + b[i, j])) <= 1e-10
            assert abs(p[i, j] - a[i, j] * b[i, j]) <= 1e-10
            assert t[j, i] == a[i, j]
    with pytest.raises(ShapeError):
        T.add(a, b.T)


def test_mean_std_along_axis_loops(rng):
    a = rng.normal(size=(6, 3))
    for j in range(3):
        col = [a[i, j] for i in range(6)]
        mu = sum(col) / 6
        sd = (sum((v - mu) ** 2 for v in col) / 6) ** 0.5
        assert abs(T.mean(a, 0)[j] - mu) <= 1e-10
        assert abs(T.std(a, 0)[j] - sd) <= 1e-10


def test_as_tensor_rejects_zero_dimension():
    with pytest.raises(ShapeError):
        T.as_tensor(np.zeros((0, 3)))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.data())
def test_reshape_preserves_values(dims, data):
    size = int(np.prod(dims))
    a = np.arange(size, dtype=float)
    perm = data.draw(st.permutations(dims))
    b = T.reshape(a.reshape(dims), perm)
    assert b.size == size
    assert sorted(b.ravel()) == sorted(a)
    # row-major: flat order is unchanged
    np.testing.assert_array_equal(b.ravel(), a)


def test_reshape_size_mismatch():
    with pytest.raises(ShapeError):
        T.reshape(np.zeros(6), (4, 2))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-3, 3).map(float), min_size=1, max_size=30))
def test_stable_argsort_law(keys):
    order = T.stable_argsort(keys)
    assert sorted(order.tolist()) == list(range(len(keys)))
    vals = [keys[i] for i in order]
    assert all(x <= y for x, y in zip(vals, vals[1:]))
    for a, b in zip(order, order[1:]):
        if keys[a] == keys[b]:
            assert a < b
