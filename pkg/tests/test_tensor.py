"""Tensor core: ops, shapes, and autodiff against independent oracles."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from effvit.tensor import (
    ParamRegistry,
    ShapeError,
    Tensor,
    conv2d,
    concat,
    cross_entropy,
    gelu,
    layer_norm,
    matmul,
    silu,
    softmax_lastdim,
    upsample,
)

from oracles import bilinear_upsample_naive, central_difference_grad, conv2d_naive


def rand(shape, seed=0, std=1.0):
    return np.random.default_rng(seed).normal(0.0, std, size=shape)


# -- matmul -------------------------------------------------------------------


def test_matmul_identity():
    a = rand((4, 4), 1)
    out = matmul(Tensor(a), Tensor(np.eye(4)))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_hand_case():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0], [6.0]])
    np.testing.assert_array_equal(matmul(a, b).data, [[17.0], [39.0]])


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(rand((2, 3))), Tensor(rand((4, 2))))


def test_matmul_batched_matches_loop():
    a = rand((5, 3, 4), 2)
    b = rand((5, 4, 2), 3)
    out = matmul(Tensor(a), Tensor(b)).data
    for i in range(5):
        np.testing.assert_allclose(out[i], a[i] @ b[i], rtol=1e-15)


def test_matmul_gradient_vs_central_difference():
    a = rand((3, 3), 4)
    b = rand((3, 3), 5)
    ta, tb = Tensor(a.copy(), requires_grad=True), Tensor(b.copy(), requires_grad=True)
    loss = matmul(ta, tb).sum()
    loss.backward()

    fa = central_difference_grad(lambda: float((ta.data @ b).sum()), ta.data)
    fb = central_difference_grad(lambda: float((a @ tb.data).sum()), tb.data)
    np.testing.assert_allclose(ta.grad, fa, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(tb.grad, fb, rtol=1e-6, atol=1e-8)


def test_matmul_broadcast_gradient_shape():
    # batched left operand against a shared right matrix
    a = Tensor(rand((4, 3, 5), 6), requires_grad=True)
    w = Tensor(rand((5, 2), 7), requires_grad=True)
    matmul(a, w).sum().backward()
    assert a.grad.shape == a.shape
    assert w.grad.shape == w.shape
    fw = central_difference_grad(lambda: float(np.matmul(a.data, w.data).sum()), w.data)
    np.testing.assert_allclose(w.grad, fw, rtol=1e-6, atol=1e-8)


# -- softmax ------------------------------------------------------------------


def test_softmax_uniform_on_zeros():
    out = softmax_lastdim(Tensor(np.zeros((2, 3))))
    np.testing.assert_allclose(out.data, np.full((2, 3), 1 / 3), atol=1e-15)


def test_softmax_hand_case():
    out = softmax_lastdim(Tensor(np.array([[0.0, np.log(3.0)]])))
    np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-14)


def test_softmax_overflow_guard():
    out = softmax_lastdim(Tensor(np.array([[1000.0, 1000.0]])))
    np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-15)


def test_softmax_shift_invariance():
    x = rand((4, 7), 8)
    a = softmax_lastdim(Tensor(x)).data
    b = softmax_lastdim(Tensor(x + 123.0)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


@given(
    st.integers(1, 4),
    st.integers(2, 6),
    st.integers(0, 2**31 - 1),
)
@settings(max_examples=50, deadline=None)
def test_softmax_rows_are_distributions(rows, cols, seed):
    x = np.random.default_rng(seed).normal(0, 5, size=(rows, cols))
    out = softmax_lastdim(Tensor(x)).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_gradient_vs_central_difference():
    x = Tensor(rand((2, 4), 9), requires_grad=True)
    w = rand((2, 4), 10)  # fixed projection so the loss depends on all entries
    (softmax_lastdim(x) * Tensor(w)).sum().backward()

    def f():
        e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
        return float((e / e.sum(axis=-1, keepdims=True) * w).sum())

    fd = central_difference_grad(f, x.data)
    np.testing.assert_allclose(x.grad, fd, rtol=1e-5, atol=1e-8)


# -- conv2d -------------------------------------------------------------------


def test_conv2d_1x1_channel_sum():
    x = np.ones((1, 2, 4, 4))
    w = np.ones((1, 2, 1, 1))
    out = conv2d(Tensor(x), Tensor(w)).data
    np.testing.assert_array_equal(out, np.full((1, 1, 4, 4), 2.0))


def test_conv2d_delta_kernel_identity():
    x = rand((2, 3, 5, 5), 11)
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    out = conv2d(Tensor(x), Tensor(w), padding=1).data
    np.testing.assert_array_equal(out, x)


@pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)])
def test_conv2d_matches_naive(stride, padding, k):
    x = rand((2, 3, 6, 6), 12)
    w = rand((4, 3, k, k), 13)
    b = rand((4,), 14)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
    ref = conv2d_naive(x, w, b, stride=stride, padding=padding)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv2d_depthwise_matches_naive():
    x = rand((2, 4, 5, 5), 15)
    w = rand((4, 1, 3, 3), 16)
    out = conv2d(Tensor(x), Tensor(w), stride=1, padding=1, groups=4).data
    ref = conv2d_naive(x, w, stride=1, padding=1, groups=4)
    np.testing.assert_allclose(out, ref, atol=1e-12)


@given(
    st.integers(1, 2),
    st.integers(1, 3),
    st.integers(4, 8),
    st.sampled_from([(3, 1), (3, 0), (1, 0)]),
    st.integers(1, 2),
    st.integers(0, 2**31 - 1),
)
@settings(max_examples=30, deadline=None)
def test_conv2d_naive_agreement_property(B, C, H, kp, stride, seed):
    k, padding = kp
    rng = np.random.default_rng(seed)
    if (H + 2 * padding - k) // stride + 1 < 1:
        return
    x = rng.normal(size=(B, C, H, H))
    w = rng.normal(size=(2, C, k, k))
    out = conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
    ref = conv2d_naive(x, w, stride=stride, padding=padding)
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_conv2d_rejects_nonpositive_output():
    with pytest.raises(ShapeError):
        conv2d(Tensor(rand((1, 1, 2, 2))), Tensor(rand((1, 1, 3, 3))), padding=0)


def test_conv2d_rejects_unsupported_kernel():
    with pytest.raises(ShapeError):
        conv2d(Tensor(rand((1, 1, 8, 8))), Tensor(rand((1, 1, 5, 5))))


def test_conv2d_gradient_vs_central_difference():
    x = Tensor(rand((1, 2, 4, 4), 17), requires_grad=True)
    w = Tensor(rand((2, 2, 3, 3), 18) * 0.5, requires_grad=True)
    b = Tensor(rand((2,), 19), requires_grad=True)
    conv2d(x, w, b, stride=2, padding=1).sum().backward()

    def f():
        return float(conv2d_naive(x.data, w.data, b.data, stride=2, padding=1).sum())

    np.testing.assert_allclose(x.grad, central_difference_grad(f, x.data), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(w.grad, central_difference_grad(f, w.data), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(b.grad, central_difference_grad(f, b.data), rtol=1e-6, atol=1e-8)


def test_conv2d_depthwise_gradient_vs_central_difference():
    x = Tensor(rand((1, 3, 4, 4), 20), requires_grad=True)
    w = Tensor(rand((3, 1, 3, 3), 21) * 0.5, requires_grad=True)
    conv2d(x, w, stride=1, padding=1, groups=3).sum().backward()

    def f():
        return float(conv2d_naive(x.data, w.data, stride=1, padding=1, groups=3).sum())

    np.testing.assert_allclose(x.grad, central_difference_grad(f, x.data), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(w.grad, central_difference_grad(f, w.data), rtol=1e-6, atol=1e-8)


# -- layer_norm ----------------------------------------------------------------


def test_layer_norm_constant_rows_map_to_beta():
    x = Tensor(np.full((2, 4), 7.0))
    gamma, beta = Tensor(np.ones(4)), Tensor(np.zeros(4))
    out = layer_norm(x, gamma, beta).data
    np.testing.assert_allclose(out, 0.0, atol=1e-6)


def test_layer_norm_two_point_row():
    out = layer_norm(
        Tensor(np.array([[1.0, 3.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0
    ).data
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-12)


def test_layer_norm_affine_params():
    x = rand((3, 5), 22)
    out = layer_norm(Tensor(x), Tensor(np.zeros(5)), Tensor(np.full(5, 5.0))).data
    np.testing.assert_allclose(out, 5.0, atol=1e-12)


def test_layer_norm_output_statistics():
    x = rand((6, 16), 23)
    out = layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-4)


def test_layer_norm_gradient_vs_central_difference():
    x = Tensor(rand((2, 5), 24), requires_grad=True)
    g = Tensor(rand((5,), 25), requires_grad=True)
    b = Tensor(rand((5,), 26), requires_grad=True)
    w = rand((2, 5), 27)
    (layer_norm(x, g, b) * Tensor(w)).sum().backward()

    def f():
        mu = x.data.mean(axis=-1, keepdims=True)
        c = x.data - mu
        var = (c * c).mean(axis=-1, keepdims=True)
        return float(((c / np.sqrt(var + 1e-6)) * g.data + b.data) @ np.ones(1) @ np.ones(1)) if False else float(
            (((c / np.sqrt(var + 1e-6)) * g.data + b.data) * w).sum()
        )

    np.testing.assert_allclose(x.grad, central_difference_grad(f, x.data), rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(g.grad, central_difference_grad(f, g.data), rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(b.grad, central_difference_grad(f, b.data), rtol=1e-5, atol=1e-7)


# -- upsample -------------------------------------------------------------------


def test_upsample_nearest_replicates():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    out = upsample(Tensor(x), (4, 4), mode="nearest").data
    expected = np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)
    np.testing.assert_array_equal(out, expected)


def test_upsample_bilinear_constant_preserved():
    x = np.full((1, 2, 3, 3), 4.2)
    out = upsample(Tensor(x), (7, 9)).data
    np.testing.assert_allclose(out, 4.2, atol=1e-12)


def test_upsample_bilinear_matches_naive():
    x = rand((2, 3, 4, 5), 28)
    out = upsample(Tensor(x), (9, 11)).data
    ref = bilinear_upsample_naive(x, (9, 11))
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_upsample_2x2_hand_case():
    x = np.array([[[0.0, 1.0], [2.0, 3.0]]])
    out = upsample(Tensor(x), (4, 4)).data
    ref = bilinear_upsample_naive(x, (4, 4))
    np.testing.assert_allclose(out, ref, atol=1e-12)
    # corners replicate (clamped sampling), center interpolates
    assert out[0, 0, 0] == 0.0 and out[0, -1, -1] == 3.0


def test_upsample_rejects_downscale():
    with pytest.raises(ShapeError):
        upsample(Tensor(rand((1, 4, 4))), (2, 2))


def test_upsample_gradient_vs_central_difference():
    x = Tensor(rand((1, 2, 3, 3), 29), requires_grad=True)
    w = rand((1, 2, 7, 7), 30)
    (upsample(x, (7, 7)) * Tensor(w)).sum().backward()

    def f():
        return float((bilinear_upsample_naive(x.data, (7, 7)) * w).sum())

    np.testing.assert_allclose(x.grad, central_difference_grad(f, x.data), rtol=1e-6, atol=1e-8)


# -- cross entropy ---------------------------------------------------------------


def test_cross_entropy_confident_correct_is_near_zero():
    logits = Tensor(np.array([[1e6, 0.0, 0.0]]))
    assert cross_entropy(logits, [0]).item() < 1e-12


def test_cross_entropy_uniform_is_log_c():
    logits = Tensor(np.zeros((2, 3)))
    np.testing.assert_allclose(cross_entropy(logits, [0, 2]).item(), np.log(3.0), atol=1e-14)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    z = rand((2, 3), 31)
    logits = Tensor(z.copy(), requires_grad=True)
    labels = np.array([1, 2])
    cross_entropy(logits, labels).backward()
    e = np.exp(z - z.max(axis=1, keepdims=True))
    sm = e / e.sum(axis=1, keepdims=True)
    sm[np.arange(2), labels] -= 1.0
    np.testing.assert_allclose(logits.grad, sm / 2, atol=1e-14)


def test_cross_entropy_rejects_out_of_range_label():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_cross_entropy_extreme_logits_stay_finite():
    loss = cross_entropy(Tensor(np.array([[1e4, -1e4, 0.0]])), [1])
    assert np.isfinite(loss.item())


# -- autodiff machinery -----------------------------------------------------------


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        Tensor(rand((2, 2)), requires_grad=True).sum(axis=0).backward()


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([3.0]), requires_grad=True)
    (x + x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0])


def test_square_gradient():
    x = Tensor(rand((4,), 32), requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-14)


def test_frozen_tensors_never_get_grad_buffers():
    frozen = Tensor(rand((3, 3), 33), requires_grad=False)
    live = Tensor(rand((3, 3), 34), requires_grad=True)
    matmul(frozen, live).sum().backward()
    assert frozen.grad is None
    assert live.grad is not None


def test_getitem_gradient_scatters():
    x = Tensor(rand((4, 3), 35), requires_grad=True)
    x[1:3].sum().backward()
    expected = np.zeros((4, 3))
    expected[1:3] = 1.0
    np.testing.assert_array_equal(x.grad, expected)


def test_concat_gradient_splits():
    a = Tensor(rand((2, 3), 36), requires_grad=True)
    b = Tensor(rand((1, 3), 37), requires_grad=True)
    w = rand((3, 3), 38)
    (concat([a, b], axis=0) * Tensor(w)).sum().backward()
    np.testing.assert_array_equal(a.grad, w[:2])
    np.testing.assert_array_equal(b.grad, w[2:])


def test_transpose_reshape_roundtrip_gradient():
    x = Tensor(rand((2, 3, 4), 39), requires_grad=True)
    y = x.transpose(2, 0, 1).reshape(4, 6)
    (y * y).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-14)


@pytest.mark.parametrize("fn,deriv", [
    (lambda t: t.tanh(), lambda z: 1 - np.tanh(z) ** 2),
    (lambda t: t.sigmoid(), lambda z: (s := 1 / (1 + np.exp(-z))) * (1 - s)),
    (lambda t: t.exp(), np.exp),
    (lambda t: t.relu(), lambda z: (z > 0).astype(float)),
])
def test_elementwise_derivatives(fn, deriv):
    z = rand((5,), 40)
    x = Tensor(z.copy(), requires_grad=True)
    fn(x).sum().backward()
    np.testing.assert_allclose(x.grad, deriv(z), atol=1e-12)


def test_silu_and_gelu_values():
    z = rand((6,), 41)
    np.testing.assert_allclose(silu(Tensor(z)).data, z / (1 + np.exp(-z)), atol=1e-14)
    c = np.sqrt(2 / np.pi)
    ref = 0.5 * z * (1 + np.tanh(c * (z + 0.044715 * z**3)))
    np.testing.assert_allclose(gelu(Tensor(z)).data, ref, atol=1e-14)


def test_composite_gradient_vs_central_difference():
    a = Tensor(rand((3, 4), 42), requires_grad=True)
    b = Tensor(rand((4, 3), 43), requires_grad=True)

    def loss():
        return (matmul(Tensor(a.data), Tensor(b.data)).tanh().sum())

    (matmul(a, b).tanh()).sum().backward()
    fa = central_difference_grad(lambda: float(np.tanh(a.data @ b.data).sum()), a.data)
    fb = central_difference_grad(lambda: float(np.tanh(a.data @ b.data).sum()), b.data)
    np.testing.assert_allclose(a.grad, fa, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(b.grad, fb, rtol=1e-6, atol=1e-8)


def test_mean_and_sum_axis_gradients():
    x = Tensor(rand((3, 4), 44), requires_grad=True)
    x.mean(axis=1).sum().backward()
    np.testing.assert_allclose(x.grad, np.full((3, 4), 0.25), atol=1e-15)


def test_float32_graph_stays_float32():
    x = Tensor(rand((2, 3)).astype(np.float32))
    w = Tensor(rand((3, 3)).astype(np.float32))
    out = softmax_lastdim(matmul(x, w) * 2.0 + 1.0)
    assert out.dtype == np.float32


# -- registry -----------------------------------------------------------------


def test_registry_counts_and_duplicates():
    reg = ParamRegistry()
    reg.add("a", Tensor(rand((2, 3)), requires_grad=True))
    reg.add("b", Tensor(rand((4,)), requires_grad=False))
    assert reg.n_trainable() == 6
    assert reg.n_frozen() == 4
    with pytest.raises(ValueError):
        reg.add("a", Tensor(rand((1,))))


def test_registry_snapshot_changed_since():
    reg = ParamRegistry()
    t = Tensor(rand((2,)), requires_grad=True)
    u = Tensor(rand((2,)), requires_grad=True)
    reg.add("t", t)
    reg.add("u", u)
    snap = reg.snapshot()
    t.data += 1.0
    assert reg.changed_since(snap) == ["t"]
