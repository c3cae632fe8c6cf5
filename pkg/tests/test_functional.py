import math

import numpy as np
import pytest

import gradcheck
import oracles
from cellattn import functional as F
from cellattn import kernels
from cellattn.tensor import NonFiniteError, finite_difference_gradient, ShapeError, TapeError, Tensor, gradient, selected_gradient


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- forward semantics ---------------------------------------------------------

def test_relu_definition():
    np.testing.assert_array_equal(F.relu(T([-1, 0, 2])).data, [0, 0, 2])


def test_relu_gradient_at_zero_is_zero():
    x = T([0.0, 1.0], grad=True)
    (g,) = gradient(F.sum(F.relu(x)), [x])
    np.testing.assert_array_equal(g, [0.0, 1.0])


def test_identity_1x1_conv():
    x = np.random.default_rng(0).standard_normal((1, 1, 3, 3))
    out = F.conv2d(T(x), T(np.ones((1, 1, 1, 1))), T(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_all_ones_3x3_conv_is_nine():
    out = F.conv2d(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0


def test_conv_matches_loop_oracle_two_channel():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    out = F.conv2d(T(x), T(w), T(b), stride=1, padding=1)
    np.testing.assert_allclose(out.data, oracles.conv2d_loops(x, w, b, 1, 1), rtol=0, atol=1e-12)


@pytest.mark.parametrize("k", [1, 3, 5, 7])
@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("pad", [0, 1, 3])
def test_conv_grid_matches_loop_oracle(k, stride, pad):
    rng = np.random.default_rng([k, stride, pad])
    x = rng.standard_normal((2, 2, 7, 8))
    w = rng.standard_normal((2, 2, k, k))
    out = F.conv2d(T(x), T(w), stride=stride, padding=pad)
    ref = oracles.conv2d_loops(x, w, None, stride, pad)
    assert out.shape == ref.shape
    assert out.shape[2] == (7 + 2 * pad - k) // stride + 1
    np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-12)


def test_conv_errors():
    with pytest.raises(ShapeError):
        F.conv2d(T(np.ones((1, 1, 2, 2))), T(np.ones((1, 1, 3, 3))))
    with pytest.raises(ShapeError):
        F.conv2d(T(np.ones((1, 2, 4, 4))), T(np.ones((1, 3, 1, 1))))


def test_maxpool_window():
    out = F.maxpool2d(T([[[[1, 2], [3, 4]]]]), 2, 2)
    assert out.data.item() == 4


@pytest.mark.parametrize("k,s,p", [(2, 2, 0), (3, 2, 1), (3, 1, 1), (2, 1, 0)])
def test_maxpool_matches_loop_oracle(k, s, p):
    x = np.random.default_rng(k * 10 + s).standard_normal((2, 3, 7, 6))
    np.testing.assert_array_equal(F.maxpool2d(T(x), k, s, p).data, oracles.maxpool_loops(x, k, s, p))


@pytest.mark.parametrize("k,s", [(2, 2), (3, 1), (3, 2), (1, 1)])
def test_avgpool_matches_loop_oracle(k, s):
    x = np.random.default_rng(k + s).standard_normal((2, 2, 7, 5))
    np.testing.assert_allclose(F.avgpool2d(T(x), k, s).data, oracles.avgpool_loops(x, k, s), atol=1e-14)


def test_pool_window_too_large():
    with pytest.raises(ShapeError):
        F.maxpool2d(T(np.ones((1, 1, 2, 2))), 3)
    with pytest.raises(ShapeError):
        F.avgpool2d(T(np.ones((1, 1, 2, 2))), 3)


def test_global_avg_pool_of_constant():
    out = F.global_avg_pool(T(np.full((2, 3, 4, 5), 2.5)))
    assert out.shape == (2, 3, 1, 1)
    np.testing.assert_array_equal(out.data, 2.5)


def test_batch_norm_train_statistics():
    x = np.random.default_rng(0).standard_normal((4, 3, 5, 5)) * 3 + 2
    out = F.batch_norm(T(x), T(np.ones(3)), T(np.zeros(3))).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)
    np.testing.assert_allclose(out, oracles.batch_norm_train(x, np.ones(3), np.zeros(3)), atol=1e-12)


def test_batch_norm_constant_channel_gives_zero():
    out = F.batch_norm(T(np.full((2, 1, 3, 3), 7.0)), T(np.ones(1)), T(np.zeros(1)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_batch_norm_eval_hand_formula():
    m, v, g, b, x = 0.5, 4.0, 2.0, -1.0, 3.0
    out = F.batch_norm(T(np.full((1, 1, 1, 1), x)), T([g]), T([b]), np.array([m]), np.array([v]), mode="eval")
    assert out.data.item() == pytest.approx(g * (x - m) / math.sqrt(v + 1e-5) + b, abs=1e-15)


def test_batch_norm_running_stats_update():
    x = np.random.default_rng(3).standard_normal((2, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    F.batch_norm(T(x), T(np.ones(2)), T(np.zeros(2)), rm, rv)
    n = 18
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))


def test_batch_norm_eval_without_stats():
    with pytest.raises(ValueError):
        F.batch_norm(T(np.ones((1, 1, 2, 2))), T([1.0]), T([0.0]), mode="eval")


def test_softmax_examples():
    np.testing.assert_allclose(F.softmax(T([[0, 0, 0, 0, 0]])).data, [[0.2] * 5])
    np.testing.assert_array_equal(F.softmax(T([[1000.0, 1000.0]])).data, [[0.5, 0.5]])
    assert F.sigmoid(T([0.0])).data.item() == 0.5


def test_dense_shape_check():
    with pytest.raises(ShapeError):
        F.dense(T(np.ones((2, 3))), T(np.ones((4, 5))))


def test_upsample_constant_plane():
    out = F.bilinear_upsample(T(np.full((1, 2, 3, 2), 1.25)), 7, 5)
    np.testing.assert_allclose(out.data, 1.25, atol=1e-15)


def test_upsample_2x2_to_4x4_hand_weights():
    x = np.array([[[[0.0, 1.0], [1.0, 0.0]]]])
    # half-pixel centres: source coords -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped index)
    w = np.array([[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]])
    expected = w @ x[0, 0] @ w.T
    out = F.bilinear_upsample(T(x), 4, 4).data[0, 0]
    np.testing.assert_allclose(out, expected, atol=1e-15)
    np.testing.assert_allclose(out[1, 1], 0.375)


@pytest.mark.parametrize("shape,target", [((1, 1, 2, 3), (5, 4)), ((2, 2, 4, 4), (3, 9)), ((1, 1, 1, 1), (3, 2))])
def test_upsample_matches_pixelwise_oracle(shape, target):
    x = np.random.default_rng(0).standard_normal(shape)
    np.testing.assert_allclose(F.bilinear_upsample(T(x), *target).data, oracles.bilinear_pixelwise(x, *target),
                               atol=1e-13)


def test_concat_shapes_and_slicing():
    a, b = np.random.default_rng(1).standard_normal((2, 3, 4, 4)), np.ones((2, 5, 4, 4))
    out = F.concat_channels([T(a), T(b)])
    assert out.shape == (2, 8, 4, 4)
    np.testing.assert_array_equal(out.data[:, :3], a)
    np.testing.assert_array_equal(out.data[:, 3:], b)


def test_concat_errors():
    with pytest.raises(ShapeError):
        F.concat_channels([])
    with pytest.raises(ShapeError):
        F.concat_channels([T(np.ones((1, 1, 2, 2))), T(np.ones((1, 1, 3, 2)))])


def test_cross_entropy_examples():
    assert F.cross_entropy_loss(T([[0.0, 1.0]]), [1]).item() == 0.0
    assert F.cross_entropy_loss(T(np.full((1, 5), 0.2)), [3]).item() == pytest.approx(math.log(5))
    p = T([[0.5, 0.5], [0.25, 0.75]])
    assert F.cross_entropy_loss(p, [0, 0]).item() == pytest.approx((math.log(2) + math.log(4)) / 2)
    logits = T(np.zeros((3, 5)))
    assert F.cross_entropy_with_logits(logits, [0, 1, 4]).item() == pytest.approx(math.log(5))


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        F.cross_entropy_with_logits(T(np.zeros((1, 3))), [3])
    with pytest.raises(ValueError):
        F.cross_entropy_loss(T(np.full((1, 2), 0.5)), [-1])


def test_fused_matches_softmax_path():
    z = np.random.default_rng(0).standard_normal((4, 5)) * 3
    labels = [0, 4, 2, 2]
    fused = F.cross_entropy_with_logits(T(z), labels).item()
    two_step = F.cross_entropy_loss(F.softmax(T(z), axis=1), labels).item()
    assert fused == pytest.approx(two_step, abs=1e-12)


# -- autograd contract examples ------------------------------------------------

def test_linear_map_gradient_is_column_sums():
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    x = T([[0.5], [-1.0]], grad=True)
    (g,) = gradient(F.sum(F.matmul(T(w), x)), [x])
    np.testing.assert_array_equal(g.ravel(), w.sum(axis=0))


def test_selected_gradient_picks_one_output():
    x = T([[1.0, 2.0, 3.0]], grad=True)
    y = F.mul(x, x)
    (g,) = selected_gradient(y, (0, 1), [x])
    np.testing.assert_array_equal(g, [[0.0, 4.0, 0.0]])
    with pytest.raises(TapeError):
        selected_gradient(y, (0, 3), [x])


def test_finite_difference_softmax_component():
    g = finite_difference_gradient(lambda v: F.softmax(T(v)).data[0], np.zeros(2), h=1e-4)
    np.testing.assert_allclose(g, [0.25, -0.25], atol=1e-8)


def test_finite_difference_examples():
    g = finite_difference_gradient(lambda v: float((v ** 2).sum()), np.array([1.0, 2.0]), h=1e-4)
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)
    np.testing.assert_array_equal(
        finite_difference_gradient(lambda v: 3.0, np.array([1.0, 2.0])), [0.0, 0.0])


def test_random_five_layer_graph_gradcheck():
    rng = np.random.default_rng(5)
    ws = [rng.standard_normal((4, 4)) * 0.7 for _ in range(5)]

    def net(t):
        h = t[0]
        for i, w in enumerate(ws):
            h = F.dense(h, Tensor(w.astype(h.dtype)))
            h = F.sigmoid(h) if i % 2 else F.mul(h, h)
        return h

    x = rng.standard_normal((2, 4)) * 0.5
    assert gradcheck.check_function(net, [x], np.float64, rng) < 1e-5
    assert gradcheck.check_function(net, [x], np.float32, rng) < 1e-3


def test_gradient_linearity():
    rng = np.random.default_rng(2)
    xv = rng.standard_normal((3, 3))
    x = T(xv, grad=True)
    (gf,) = gradient(F.sum(F.exp(x)), [x])
    (gg,) = gradient(F.sum(F.sigmoid(x)), [x])
    (gc,) = gradient(F.add(F.mul(F.sum(F.exp(x)), 2.0), F.mul(F.sum(F.sigmoid(x)), -3.0)), [x])
    np.testing.assert_allclose(gc, 2 * gf - 3 * gg, rtol=1e-14, atol=1e-14)


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    x, w = rng.standard_normal((2, 3, 9, 9)).astype(np.float32), rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = F.conv2d(Tensor(x), Tensor(w), padding=1).data
    b = F.conv2d(Tensor(x), Tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()


def test_non_finite_intermediate_reported():
    with pytest.raises(NonFiniteError) as err:
        F.exp(T([1000.0]))
    assert "exp" in str(err.value)


# -- gradient checks (a few instances each; the acceptance suite runs 100) ----------

@pytest.mark.parametrize("name", sorted(gradcheck.PRIMITIVES))
def test_primitive_gradcheck(name):
    for seed in range(5):
        assert gradcheck.run_primitive(name, seed, np.float64) < 1e-5
        assert gradcheck.run_primitive(name, seed, np.float32) < 1e-3


@pytest.mark.parametrize("name", sorted(gradcheck.BLOCKS))
def test_block_gradcheck(name):
    for seed in range(3):
        assert gradcheck.run_block(name, seed, np.float64) < 1e-5
        assert gradcheck.run_block(name, seed, np.float32) < 1e-3


# -- kernel backends -------------------------------------------------------------

@pytest.mark.parametrize("backend", kernels.available_backends())
def test_backends_agree_bitwise(backend):
    rng = np.random.default_rng(0)
    for dtype in (np.float32, np.float64):
        x = rng.standard_normal((2, 3, 9, 7)).astype(dtype)
        w = rng.standard_normal((4, 3, 3, 3)).astype(dtype)
        prev = kernels.set_backend("python")
        try:
            xt = Tensor(x, requires_grad=True)
            out = F.conv2d(xt, Tensor(w), stride=2, padding=1)
            ref = (out.data, gradient(F.sum(F.mul(out, out)), [xt])[0],
                   F.maxpool2d(Tensor(x), 3, 2, 1).data)
            kernels.set_backend(backend)
            xt = Tensor(x, requires_grad=True)
            out = F.conv2d(xt, Tensor(w), stride=2, padding=1)
            got = (out.data, gradient(F.sum(F.mul(out, out)), [xt])[0],
                   F.maxpool2d(Tensor(x), 3, 2, 1).data)
        finally:
            kernels.set_backend(prev)
        for a, b in zip(ref, got):
            assert a.tobytes() == b.tobytes()


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.set_backend("fortran")
