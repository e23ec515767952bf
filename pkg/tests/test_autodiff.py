import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from deepkernel.autodiff import (
    BatchNormState,
    DegenerateBatchError,
    ShapeError,
    Tensor,
    UsageError,
    backward,
    batchnorm2d,
    box_sum,
    channel_softmax,
    clip,
    concat,
    concat_channels,
    conv2d,
    exp,
    log,
    matmul,
    maxpool2x2,
    mse_loss,
    no_grad,
    relu,
    reshape,
    roll,
    shift,
    sigmoid,
    sparse_matvec,
    stack,
    transpose,
    upsample_bilinear2x,
)
from deepkernel.autodiff.tensor import getitem, power

from conftest import check_grad, projected

SEEDS = range(10)
TOL = 1e-4


def rng(seed):
    return np.random.default_rng(seed)


# -- examples -------------------------------------------------------------------
def test_identity_convolution():
    x = rng(0).normal(size=(2, 5, 5, 3))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0] = np.eye(3)
    out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, x)


def test_conv_zero_input_gives_bias():
    out = conv2d(Tensor(np.zeros((1, 4, 4, 2))), Tensor(rng(1).normal(size=(3, 3, 2, 3))), Tensor([1.0, -2.0, 0.5]))
    np.testing.assert_allclose(out.data, np.broadcast_to([1.0, -2.0, 0.5], (1, 4, 4, 3)))


def test_conv_matches_direct_loop():
    x = rng(2).normal(size=(1, 4, 5, 2))
    w = rng(3).normal(size=(3, 3, 2, 3))
    out = conv2d(Tensor(x), Tensor(w)).data
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 4, 5, 3))
    for i in range(4):
        for j in range(5):
            ref[0, i, j] = np.einsum("abc,abcd->d", pad[0, i : i + 3, j : j + 3], w)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_shape_mismatch():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((3, 3, 3, 1))))


def test_batchnorm_standardised_input_passes_through():
    x = rng(4).normal(size=(4, 6, 6, 3))
    x = (x - x.mean(axis=(0, 1, 2))) / x.std(axis=(0, 1, 2))
    state = BatchNormState(3, np.float64)
    out = batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), state, True)
    np.testing.assert_allclose(out.data, x, rtol=1e-5, atol=1e-5)


def test_batchnorm_constant_input_is_zero():
    state = BatchNormState(2, np.float64)
    out = batchnorm2d(Tensor(np.full((2, 3, 3, 2), 7.0)), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, True)
    np.testing.assert_array_equal(out.data, 0.0)


def test_batchnorm_running_stats_and_eval():
    x = rng(5).normal(3.0, 2.0, size=(2, 4, 4, 1))
    state = BatchNormState(1, np.float64)
    batchnorm2d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), state, True)
    n = x.size
    np.testing.assert_allclose(state.mean, 0.1 * x.mean())
    np.testing.assert_allclose(state.var, 0.9 + 0.1 * x.var() * n / (n - 1))
    out = batchnorm2d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), state, False)
    np.testing.assert_allclose(out.data, (x - state.mean) / np.sqrt(state.var + 1e-5))


def test_batchnorm_degenerate_batch():
    state = BatchNormState(1, np.float64)
    with pytest.raises(DegenerateBatchError):
        batchnorm2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)), state, True)


def test_relu_example():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_maxpool_example_and_odd_dims():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
    np.testing.assert_array_equal(maxpool2x2(x).data.ravel(), [4.0])
    with pytest.raises(ShapeError):
        maxpool2x2(Tensor(np.zeros((1, 3, 4, 1))))


def test_maxpool_ties_route_to_first_index():
    x = Tensor(np.ones((1, 2, 2, 1)), requires_grad=True)
    backward(maxpool2x2(x).sum())
    np.testing.assert_array_equal(x.grad.ravel(), [1, 0, 0, 0])


def test_upsample_then_pool_constant():
    x = Tensor(np.full((1, 3, 3, 2), 2.5))
    np.testing.assert_allclose(maxpool2x2(upsample_bilinear2x(x)).data, 2.5)


def test_upsample_half_pixel_values():
    x = Tensor(np.array([0.0, 4.0]).reshape(1, 1, 2, 1))
    out = upsample_bilinear2x(x).data[0, 0, :, 0]
    np.testing.assert_allclose(out, [0.0, 1.0, 3.0, 4.0])


def test_concat_channels_requires_matching_dims():
    with pytest.raises(ShapeError):
        concat_channels([Tensor(np.zeros((1, 2, 2, 1))), Tensor(np.zeros((1, 4, 4, 1)))])


def test_softmax_examples():
    out = channel_softmax(Tensor(np.zeros((1, 2, 2, 8))), 4)
    assert out.shape == (1, 2, 2, 2, 4)
    np.testing.assert_allclose(out.data, 0.25)
    big = channel_softmax(Tensor(np.array([500.0, -500.0, -500.0, -500.0])), 4)
    np.testing.assert_allclose(big.data, [[1.0, 0.0, 0.0, 0.0]], atol=1e-12)
    with pytest.raises(ShapeError):
        channel_softmax(Tensor(np.zeros((1, 1, 1, 6))), 4)


@given(hnp.arrays(np.float64, (2, 3, 12), elements=st.floats(-30, 30)))
@settings(max_examples=50, deadline=None)
def test_softmax_groups_sum_to_one(logits):
    out = channel_softmax(Tensor(logits), 4).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


def test_sparse_matvec_examples():
    import scipy.sparse as sp

    eye = sp.identity(6, format="csr")
    a = rng(6).normal(size=(2, 6))
    np.testing.assert_array_equal(sparse_matvec(eye, Tensor(a)).data, a)
    np.testing.assert_array_equal(sparse_matvec(eye, Tensor(np.zeros(6))).data, 0.0)
    dense = rng(7).normal(size=(6, 6)) * (rng(8).random((6, 6)) < 0.4)
    np.testing.assert_allclose(sparse_matvec(sp.csr_matrix(dense), Tensor(a)).data, a @ dense.T, atol=1e-12)
    with pytest.raises(ShapeError):
        sparse_matvec(eye, Tensor(np.zeros(5)))


def test_backward_examples():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    y = Tensor(rng(9).normal(size=4), requires_grad=True)
    backward(mse_loss(y, y.detach()))
    np.testing.assert_array_equal(y.grad, 0.0)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        backward(x * 2.0)


def test_backward_isolation():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    _ = (b * 5.0).sum()
    backward((a * 2.0).sum())
    assert b.grad is None
    np.testing.assert_array_equal(a.grad, 2.0)


def test_backward_accumulates_shared_use():
    x = Tensor(np.array([2.0]), requires_grad=True)
    backward((x * x + x).sum())
    np.testing.assert_allclose(x.grad, [5.0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad
    with pytest.raises(UsageError):
        backward(y)


def test_forward_is_deterministic():
    x = rng(10).normal(size=(2, 8, 8, 3))
    w = rng(11).normal(size=(3, 3, 3, 4))
    a = conv2d(Tensor(x), Tensor(w)).data
    b = conv2d(Tensor(x), Tensor(w)).data
    assert a.tobytes() == b.tobytes()


def test_box_sum_and_shift_values():
    x = Tensor(np.arange(5.0).reshape(1, 1, 5, 1))
    out = box_sum(x, -1, 1, axes=(2,)).data.ravel()
    np.testing.assert_allclose(out, [1, 3, 6, 9, 7])
    np.testing.assert_array_equal(shift(x, 0, 2).data.ravel(), [2, 3, 4, 0, 0])


# -- finite-difference checks, 64-bit, ten seeds -------------------------------------
def _bn(x, g, b):
    return batchnorm2d(x, g, b, BatchNormState(x.shape[-1], np.float64), True)


PRIMITIVES = {
    "conv2d": (lambda x, w, b: conv2d(x, w, b), lambda r: [r.normal(size=(1, 5, 5, 2)), r.normal(size=(3, 3, 2, 3)), r.normal(size=3)]),
    "batchnorm2d": (_bn, lambda r: [r.normal(size=(2, 3, 3, 2)), r.normal(1, 0.3, size=2), r.normal(size=2)]),
    "relu": (relu, lambda r: [r.normal(size=(3, 4)) + np.sign(r.normal(size=(3, 4))) * 0.05]),
    "sigmoid": (sigmoid, lambda r: [r.normal(size=(3, 4)) * 3]),
    "exp": (exp, lambda r: [r.normal(size=5)]),
    "log": (log, lambda r: [r.uniform(0.5, 2.0, size=5)]),
    "power": (lambda x: power(x, 3.0), lambda r: [r.normal(size=5)]),
    "clip": (lambda x: clip(x, -0.5, 0.5), lambda r: [r.normal(size=6) * 0.5 + 0.03]),
    "div": (lambda a, b: a / b, lambda r: [r.normal(size=(2, 3)), r.uniform(1, 2, size=3)]),
    "mul_broadcast": (lambda a, b: a * b - b, lambda r: [r.normal(size=(2, 3)), r.normal(size=(1, 3))]),
    "matmul": (matmul, lambda r: [r.normal(size=(4, 3)), r.normal(size=(3, 5))]),
    "maxpool2x2": (maxpool2x2, lambda r: [r.permutation(32).astype(float).reshape(1, 4, 4, 2) * 0.1]),
    "upsample_bilinear2x": (upsample_bilinear2x, lambda r: [r.normal(size=(1, 3, 4, 2))]),
    "concat_channels": (lambda a, b: concat_channels([a, b]), lambda r: [r.normal(size=(1, 2, 2, 1)), r.normal(size=(1, 2, 2, 3))]),
    "channel_softmax": (lambda x: channel_softmax(x, 4), lambda r: [r.normal(size=(1, 2, 2, 8))]),
    "box_sum": (lambda x: box_sum(x, -1, 2), lambda r: [r.normal(size=(1, 5, 4, 2))]),
    "shift": (lambda x: shift(x, 1, -2), lambda r: [r.normal(size=(1, 4, 5, 1))]),
    "reshape_transpose": (lambda x: transpose(reshape(x, (3, 4)), (1, 0)), lambda r: [r.normal(size=(2, 6))]),
    "getitem": (lambda x: getitem(x, (slice(None), [0, 2, 2])), lambda r: [r.normal(size=(2, 3))]),
    "concat_stack": (lambda a, b: stack([concat([a, b], 0), concat([b, a], 0)], 1), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
    "roll": (lambda x: roll(x, -1, 0), lambda r: [r.normal(size=(3, 2))]),
    "mean_axes": (lambda x: x.mean(axis=(1, 2)), lambda r: [r.normal(size=(2, 3, 4))]),
    "mse_loss": (lambda a, b: mse_loss(a, b), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    fn, make = PRIMITIVES[name]
    for seed in SEEDS:
        arrays = make(rng(100 + seed))
        assert check_grad(projected(fn, seed), arrays) < TOL, f"{name} seed {seed}"


def test_sparse_matvec_gradient():
    import scipy.sparse as sp

    for seed in SEEDS:
        r = rng(200 + seed)
        mat = sp.random(6, 6, density=0.4, random_state=seed, format="csr")
        assert check_grad(projected(lambda a: sparse_matvec(mat, a), seed), [r.normal(size=(2, 6))]) < TOL


def test_composite_conv_bn_relu_mse():
    for seed in SEEDS:
        r = rng(300 + seed)
        target = r.normal(size=(2, 4, 4, 2))

        def graph(x, w):
            h = relu(_bn(conv2d(x, w), Tensor(np.ones(2)), Tensor(np.zeros(2))))
            return mse_loss(h, target)

        assert check_grad(graph, [r.normal(size=(2, 4, 4, 1)), r.normal(size=(3, 3, 1, 2))]) < TOL
