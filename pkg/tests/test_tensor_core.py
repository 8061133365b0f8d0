import numpy as np
import pytest

from e2eloc.tensor_core import (
    SGD,
    Adam,
    GraphError,
    Tensor,
    bilinear_sample,
    check_gradients,
    directional_max_pool,
    grad_scale,
    no_grad,
    relative_error,
    smooth_l1,
    softmax_cross_entropy,
    step_lr,
)
from e2eloc.tensor_core import functional as F
from e2eloc.tensor_core.nn import BatchNorm1d, Conv2d, Linear, Parameter


def test_sum_gradient_is_ones():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    F.sum(x).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_square_sum_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    F.sum(x * x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_shared_node_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = x * 2.0
    F.sum(y * y + y).backward()  # d/dx (4x^2 + 2x) = 8x + 2
    np.testing.assert_allclose(x.grad, [26.0])


def test_leaf_grads_accumulate_across_backward_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    F.sum(x).backward()
    F.sum(x * 3.0).backward()
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])


def test_second_backward_raises_unless_retained():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = F.sum(F.square(x))
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()
    loss2 = F.sum(F.square(x))
    x.grad = None
    loss2.backward(retain_graph=True)
    loss2.backward()
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_backward_needs_scalar_or_explicit_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_broadcast_gradients_reduce_to_operand_shape():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((1, 3)), requires_grad=True)
    F.sum(a * b).backward()
    assert b.grad.shape == (1, 3)
    np.testing.assert_array_equal(b.grad, [[2.0, 2.0, 2.0]])


def test_integer_input_becomes_float():
    assert Tensor([1, 2]).dtype == np.float64


# gradient gate


def test_grad_scale_zero_cuts():
    x = Tensor(np.ones(3), requires_grad=True)
    w = Tensor(np.ones(3), requires_grad=True)
    F.sum(F.mul(grad_scale(x, 0.0), w)).backward()
    assert x.grad is None or not np.any(x.grad)
    np.testing.assert_array_equal(w.grad, np.ones(3))


def test_grad_scale_one_is_transparent():
    x = Tensor([1.0, -2.0], requires_grad=True)
    F.sum(F.square(grad_scale(x, 1.0))).backward()
    np.testing.assert_array_equal(x.grad, [2.0, -4.0])


def test_grad_scale_half_on_linear_loss():
    x = Tensor(np.zeros(4), requires_grad=True)
    F.sum(grad_scale(x, 0.5) * 2.0).backward()
    np.testing.assert_array_equal(x.grad, np.ones(4))


def test_grad_scale_forward_is_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3)))
    assert np.array_equal(grad_scale(x, 0.25).data, x.data)


def test_grad_scale_rejects_negative():
    with pytest.raises(ValueError):
        grad_scale(Tensor([1.0]), -1.0)


# bilinear sampling


def _ramp(n=4):
    y, x = np.mgrid[0:n, 0:n].astype(np.float64)
    return x + n * y


def _bilinear_oracle(img, theta, out_h, out_w):
    """Direct per-pixel bilinear lookup in pixel-centre coordinates, zero outside."""
    h, w = img.shape
    sx, sy, tx, ty = theta
    out = np.zeros((out_h, out_w))
    for v in range(out_h):
        for u in range(out_w):
            xn = sx * ((2 * u + 1) / out_w - 1) + tx
            yn = sy * ((2 * v + 1) / out_h - 1) + ty
            px = (xn + 1) * w / 2 - 0.5
            py = (yn + 1) * h / 2 - 0.5
            x0, y0 = int(np.floor(px)), int(np.floor(py))
            acc = 0.0
            for yy, wy in ((y0, 1 - (py - y0)), (y0 + 1, py - y0)):
                for xx, wx in ((x0, 1 - (px - x0)), (x0 + 1, px - x0)):
                    if 0 <= yy < h and 0 <= xx < w:
                        acc += wy * wx * img[yy, xx]
            out[v, u] = acc
    return out


def test_bilinear_identity_is_exact():
    img = np.random.default_rng(1).normal(size=(2, 3, 5, 7))
    out = bilinear_sample(Tensor(img), Tensor(np.tile([1.0, 1.0, 0.0, 0.0], (2, 1))), 5, 7)
    assert np.array_equal(out.data, img)


def test_bilinear_half_crop_on_ramp():
    img = _ramp(4)
    out = bilinear_sample(Tensor(img[None, None]), Tensor([[0.5, 0.5, 0.0, 0.0]]), 4, 4).data[0, 0]
    # pixel-centre positions of the half crop are 0.75, 1.25, 1.75, 2.25 on each axis
    pos = np.array([0.75, 1.25, 1.75, 2.25])
    np.testing.assert_allclose(out, pos[None, :] + 4 * pos[:, None], atol=1e-12)
    np.testing.assert_allclose(out, _bilinear_oracle(img, (0.5, 0.5, 0.0, 0.0), 4, 4), atol=1e-12)


def test_bilinear_outside_grid_is_zero():
    img = np.ones((1, 1, 4, 4))
    out = bilinear_sample(Tensor(img), Tensor([[1.0, 1.0, 2.0, 0.0]]), 4, 4)
    assert not np.any(out.data)


def test_bilinear_matches_oracle_random():
    rng = np.random.default_rng(2)
    for _ in range(20):
        img = rng.normal(size=(6, 9))
        theta = (rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2), rng.uniform(-1, 1), rng.uniform(-1, 1))
        out = bilinear_sample(Tensor(img[None, None]), Tensor([theta]), 5, 4).data[0, 0]
        np.testing.assert_allclose(out, _bilinear_oracle(img, theta, 5, 4), atol=1e-12)


def test_bilinear_flip():
    img = _ramp(4)[None, None]
    out = bilinear_sample(Tensor(img), Tensor([[-1.0, 1.0, 0.0, 0.0]]), 4, 4).data
    np.testing.assert_array_equal(out, img[..., ::-1])


def test_bilinear_shape_checks():
    with pytest.raises(ValueError):
        bilinear_sample(Tensor(np.zeros((2, 1, 4, 4))), Tensor(np.zeros((3, 4))), 4, 4)


# directional max pooling


def test_directional_pool_constant():
    m = Tensor(np.full((1, 1, 5, 6), 0.7))
    np.testing.assert_array_equal(directional_max_pool(m, "vertical").data, np.full((1, 6), 0.7))
    np.testing.assert_array_equal(directional_max_pool(m, "horizontal").data, np.full((1, 5), 0.7))


def test_directional_pool_single_hot_pixel():
    m = np.zeros((1, 1, 16, 16))
    m[0, 0, 2, 5] = 1.0
    col = directional_max_pool(Tensor(m), "vertical").data[0]
    row = directional_max_pool(Tensor(m), "horizontal").data[0]
    assert col[5] == 1.0 and col.sum() == 1.0
    assert row[2] == 1.0 and row.sum() == 1.0


def test_directional_pool_brute_force():
    m = np.random.default_rng(3).normal(size=(3, 1, 16, 16))
    col = directional_max_pool(Tensor(m), "vertical").data
    row = directional_max_pool(Tensor(m), "horizontal").data
    for b in range(3):
        for j in range(16):
            assert col[b, j] == max(m[b, 0, i, j] for i in range(16))
        for i in range(16):
            assert row[b, i] == max(m[b, 0, i, j] for j in range(16))


def test_directional_pool_gradient_goes_to_argmax():
    m = Tensor(np.array([[[[0.0, 3.0], [2.0, 1.0]]]]), requires_grad=True)
    F.sum(directional_max_pool(m, "vertical")).backward()
    np.testing.assert_array_equal(m.grad[0, 0], [[0.0, 1.0], [1.0, 0.0]])


def test_directional_pool_bad_axis():
    with pytest.raises(ValueError):
        directional_max_pool(Tensor(np.zeros((1, 1, 2, 2))), "diagonal")


# losses


def test_smooth_l1_values():
    assert smooth_l1(Tensor([1.5]), Tensor([1.5])).item() == 0.0
    assert smooth_l1(Tensor([0.5]), Tensor([0.0])).item() == 0.125
    assert smooth_l1(Tensor([2.0]), Tensor([0.0])).item() == 1.5


def test_smooth_l1_is_mean():
    assert smooth_l1(Tensor([0.5, 2.0]), Tensor([0.0, 0.0])).item() == pytest.approx((0.125 + 1.5) / 2)


def test_smooth_l1_target_gets_no_gradient():
    p = Tensor([0.2, 3.0], requires_grad=True)
    t = Tensor([0.0, 0.0], requires_grad=True)
    smooth_l1(p, t).backward()
    np.testing.assert_allclose(p.grad, [0.1, 0.5])
    assert t.grad is None


def test_cross_entropy_uniform():
    assert softmax_cross_entropy(Tensor(np.zeros((2, 4))), [0, 3]).item() == pytest.approx(np.log(4))


def test_cross_entropy_saturated():
    loss = softmax_cross_entropy(Tensor([[1000.0, 0.0]]), [0]).item()
    assert np.isfinite(loss) and loss == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_direct_formula():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(3, 5))
    y = np.array([4, 0, 2])
    direct = -np.mean([np.log(np.exp(z[i, y[i]]) / np.exp(z[i]).sum()) for i in range(3)])
    assert softmax_cross_entropy(Tensor(z), y).item() == pytest.approx(direct, rel=1e-12)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


# conv, pooling and friends


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            patch = xp[:, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
            ref[:, :, i, j] = np.einsum("bchw,ochw->bo", patch, w) + b
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_max_pool_and_means():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(F.max_pool2d(Tensor(x), 2).data[0, 0], [[5, 7], [13, 15]])
    two = np.stack([np.zeros((3, 3)), np.full((3, 3), 2.0)])[None]
    np.testing.assert_array_equal(F.channel_mean(Tensor(two)).data, np.ones((1, 1, 3, 3)))
    np.testing.assert_array_equal(F.global_avg_pool(Tensor(two)).data, [[0.0, 2.0]])


def test_batched_matmul_gradients():
    rng = np.random.default_rng(6)
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 3, 5)))
    results = check_gradients(lambda: F.sum(F.mul(F.matmul(a, b), w)), {"a": a, "b": b})
    assert max(r.error for r in results) < 1e-7


def test_relative_error_definition():
    assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
    assert relative_error(np.zeros(2), np.zeros(2)) == 0.0
    assert relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)


# modules and optimizers


def test_module_traversal_and_state_dict():
    rng = np.random.default_rng(7)
    lin = Linear(3, 2, rng)
    assert lin.num_parameters() == 8
    state = lin.state_dict()
    lin.weight.data[...] = 0
    lin.load_state_dict(state)
    np.testing.assert_array_equal(lin.weight.data, state["weight"])


def test_batchnorm_eval_uses_running_stats():
    bn = BatchNorm1d(2, dtype=np.float64)
    x = Tensor(np.array([[0.0, 10.0], [2.0, 30.0]]))
    out = bn(x).data
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(bn.running_mean, [0.1, 2.0])
    bn.eval()
    np.testing.assert_allclose(bn(x).data[:, 0], (x.data[:, 0] - 0.1) / np.sqrt(bn.running_var[0] + bn.eps))


def test_conv_default_padding_keeps_size():
    conv = Conv2d(1, 2, 3, np.random.default_rng(0))
    assert conv(Tensor(np.zeros((1, 1, 5, 5), dtype=np.float32))).shape == (1, 2, 5, 5)


def test_sgd_momentum_step():
    p = Parameter(np.array([1.0]))
    opt = SGD([p], lr=0.1, momentum=0.9)
    p.grad = np.array([1.0])
    opt.step()
    p.grad = np.array([1.0])
    opt.step()
    # velocity 1 then 1.9
    np.testing.assert_allclose(p.data, [1.0 - 0.1 - 0.19])


def test_optimizers_skip_params_without_grad():
    p = Parameter(np.array([1.0]))
    for opt in (SGD([p], lr=0.1), Adam([p], lr=0.1)):
        p.grad = None
        opt.step()
        assert p.data[0] == 1.0


def test_adam_first_step_has_lr_size():
    p = Parameter(np.array([0.0]))
    opt = Adam([p], lr=0.01)
    p.grad = np.array([123.0])
    opt.step()
    np.testing.assert_allclose(p.data, [-0.01], rtol=1e-6)


def test_step_lr():
    assert step_lr(0.003, 0, 10) == 0.003
    assert step_lr(0.003, 10, 10) == pytest.approx(0.0003)
    assert step_lr(0.003, 25, 10) == pytest.approx(0.00003)
