import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convmvm.errors import MaskError, ShapeError
from convmvm.tensor import (
    Tensor,
    add,
    add_mask_token,
    conv2d,
    gelu,
    grn,
    layer_norm_channels,
    linear,
    mask_sites,
    masked_patch_mse,
    mse_mean,
    no_grad,
    reshape,
    scale,
    sub,
    transpose,
    tsum,
)
from conftest import check_grads, numeric_grad, rel_error


class TestConv2d:
    def test_ones_3x3(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        out = conv2d(x, w, b)
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9.0

    def test_identity_1x1(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 5, 5)))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        out = conv2d(x, Tensor(w), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_output_size_and_stride(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 9, 7)))
        w = Tensor(rng.normal(size=(4, 2, 3, 3)))
        out = conv2d(x, w, stride=2, padding=1)
        assert out.shape == (1, 4, 5, 4)  # floor((9+2-3)/2)+1, floor((7+2-3)/2)+1

    def test_against_direct_loops(self, rng):
        x = rng.normal(size=(1, 2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for k in range(3):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    patch = xp[0, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                    ref[0, k, i, j] = (patch * w[k]).sum() + b[k]
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)

    def test_depthwise_equals_per_channel(self, rng):
        x = rng.normal(size=(2, 4, 6, 6))
        w = rng.normal(size=(4, 1, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), None, padding=1, groups=4).data
        for c in range(4):
            ref = conv2d(Tensor(x[:, c : c + 1]), Tensor(w[c : c + 1]), None, padding=1).data
            np.testing.assert_allclose(out[:, c : c + 1], ref, atol=1e-12)

    def test_gradients_match_finite_differences(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        t = Tensor(rng.normal(size=(1, 3, 3, 3)))
        check_grads(lambda: mse_mean(conv2d(x, w, b), t), {"x": x, "w": w, "b": b})

    def test_strided_grouped_gradients(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 6, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 1, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=4), requires_grad=True)
        t = Tensor(rng.normal(size=(1, 4, 3, 3)))
        check_grads(
            lambda: mse_mean(conv2d(x, w, b, stride=2, padding=1, groups=4), t),
            {"x": x, "w": w, "b": b},
        )

    def test_general_groups_gradients(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 5, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(6, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=6), requires_grad=True)
        t = Tensor(rng.normal(size=(1, 6, 3, 3)))
        check_grads(lambda: mse_mean(conv2d(x, w, b, groups=2), t), {"x": x, "w": w, "b": b})

    def test_shape_errors_name_axes(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 2, 2)))
        w = Tensor(rng.normal(size=(1, 2, 5, 5)))
        with pytest.raises(ShapeError, match="H=2"):
            conv2d(x, w)
        with pytest.raises(ShapeError, match="groups"):
            conv2d(Tensor(rng.normal(size=(1, 3, 4, 4))), Tensor(rng.normal(size=(2, 1, 3, 3))), groups=2)


class TestLayerNorm:
    def test_constant_channel_gives_beta(self, rng):
        x = Tensor(np.full((2, 4, 3, 3), 7.0))
        gamma = Tensor(rng.normal(size=4))
        beta = Tensor(rng.normal(size=4))
        out = layer_norm_channels(x, gamma, beta)
        expected = np.broadcast_to(beta.data[None, :, None, None], out.shape)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_unit_affine_normalizes(self, rng):
        x = Tensor(rng.normal(size=(2, 8, 4, 4)) * 3 + 1)
        out = layer_norm_channels(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-6)

    def test_gradients(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 3, 3)), requires_grad=True)
        gamma = Tensor(rng.normal(size=4), requires_grad=True)
        beta = Tensor(rng.normal(size=4), requires_grad=True)
        t = Tensor(rng.normal(size=(1, 4, 3, 3)))
        check_grads(
            lambda: mse_mean(layer_norm_channels(x, gamma, beta), t),
            {"x": x, "gamma": gamma, "beta": beta},
        )

    def test_eps_must_be_positive(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 2, 2)))
        with pytest.raises(ValueError):
            layer_norm_channels(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)


class TestGrn:
    def test_all_visible_mask_is_noop(self, rng):
        x = Tensor(rng.normal(size=(2, 5, 4, 4)))
        gamma = Tensor(rng.normal(size=5))
        beta = Tensor(rng.normal(size=5))
        plain = grn(x, gamma, beta).data
        masked = grn(x, gamma, beta, site_mask=np.ones((4, 4), dtype=bool)).data
        np.testing.assert_allclose(plain, masked, atol=1e-12)

    def test_single_visible_site_finite(self, rng):
        x = rng.normal(size=(1, 3, 4, 4))
        vis = np.zeros((4, 4), dtype=bool)
        vis[1, 2] = True
        out = grn(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), site_mask=vis)
        assert np.isfinite(out.data).all()
        # Response per channel reduces to that site's own magnitude.
        gx = np.abs(x[0, :, 1, 2])
        nx = gx / (gx.mean() + 1e-6)
        np.testing.assert_allclose(
            out.data[0, :, 1, 2], x[0, :, 1, 2] * nx + x[0, :, 1, 2], atol=1e-12
        )

    def test_all_masked_errors(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 2, 2)))
        with pytest.raises(MaskError, match="no visible sites"):
            grn(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), site_mask=np.zeros((2, 2), dtype=bool))

    def test_gradients(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 3, 3)), requires_grad=True)
        gamma = Tensor(rng.normal(size=3), requires_grad=True)
        beta = Tensor(rng.normal(size=3), requires_grad=True)
        t = Tensor(rng.normal(size=(1, 3, 3, 3)))
        check_grads(lambda: mse_mean(grn(x, gamma, beta), t), {"x": x, "gamma": gamma, "beta": beta})

    def test_gradients_with_site_mask(self, rng):
        vis = rng.random((3, 3)) < 0.6
        vis[0, 0] = True
        x = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
        gamma = Tensor(rng.normal(size=3), requires_grad=True)
        beta = Tensor(rng.normal(size=3), requires_grad=True)
        t = Tensor(rng.normal(size=(2, 3, 3, 3)))
        check_grads(
            lambda: mse_mean(grn(x, gamma, beta, site_mask=vis), t),
            {"x": x, "gamma": gamma, "beta": beta},
        )


class TestElementwiseAndLoss:
    def test_mse_identical_is_zero(self, rng):
        x = Tensor(rng.normal(size=(3, 4)))
        assert mse_mean(x, x).item() == 0.0

    def test_mse_mean_of_0_and_4(self):
        assert mse_mean(Tensor([0.0, 2.0]), Tensor([0.0, 0.0])).item() == 2.0

    def test_gelu_values(self):
        out = gelu(Tensor([0.0]))
        assert out.data[0] == 0.0
        assert abs(gelu(Tensor([1.0])).data[0] - 0.8413447460685429) < 1e-12

    def test_gelu_gradient(self, rng):
        x = Tensor(rng.normal(size=(7,)) * 2, requires_grad=True)
        check_grads(lambda: mse_mean(gelu(x), Tensor(np.zeros(7))), {"x": x})

    def test_linear_gradient(self, rng):
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=5), requires_grad=True)
        t = Tensor(rng.normal(size=(4, 5)))
        check_grads(lambda: mse_mean(linear(x, w, b), t), {"x": x, "w": w, "b": b})

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


class TestBackward:
    def test_sum_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        tsum(x).backward()
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_mse_analytic_derivative(self):
        x = Tensor([2.0], requires_grad=True)
        mse_mean(x, Tensor([0.0])).backward()
        assert x.grad[0] == 4.0  # d/dx mean(x^2) = 2x

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            add(x, x).backward()

    def test_accumulation_without_zero_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        tsum(x).backward()
        tsum(x).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_reused_node_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        y = add(x, x)
        tsum(y).backward()
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_linearity(self, rng):
        data = rng.normal(size=(4, 4))
        t1 = Tensor(rng.normal(size=(4, 4)))
        t2 = Tensor(rng.normal(size=(4, 4)))
        a, b = 0.7, -1.3

        def grad_of(fn):
            x = Tensor(data.copy(), requires_grad=True)
            fn(x).backward()
            return x.grad

        g1 = grad_of(lambda x: mse_mean(x, t1))
        g2 = grad_of(lambda x: mse_mean(gelu(x), t2))
        combined = grad_of(lambda x: add(scale(mse_mean(x, t1), a), scale(mse_mean(gelu(x), t2), b)))
        np.testing.assert_allclose(combined, a * g1 + b * g2, atol=1e-12)

    def test_no_grad_blocks_recording(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            y = tsum(gelu(x))
        assert not y.requires_grad
        assert y._backward_fn is None

    def test_determinism_bitwise(self, rng):
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))

        def run():
            return conv2d(gelu(Tensor(x)), Tensor(w), None, padding=1).data

        a, b = run(), run()
        assert (a == b).all()


class TestMaskPrimitives:
    def test_mask_sites_zeroes_and_blocks_grad(self, rng):
        vis = np.array([[True, False], [False, True]])
        x = Tensor(rng.normal(size=(1, 3, 2, 2)), requires_grad=True)
        y = mask_sites(x, vis)
        assert (y.data[:, :, ~vis] == 0.0).all()
        tsum(y).backward()
        assert (x.grad[:, :, ~vis] == 0.0).all()
        assert (x.grad[:, :, vis] == 1.0).all()

    def test_add_mask_token_placement_and_grad(self, rng):
        vis = np.array([[True, False], [False, True]])
        x = Tensor(np.zeros((2, 3, 2, 2)), requires_grad=True)
        token = Tensor(rng.normal(size=3), requires_grad=True)
        y = add_mask_token(x, token, vis)
        np.testing.assert_array_equal(y.data[0, :, 0, 1], token.data)
        np.testing.assert_array_equal(y.data[0, :, 0, 0], 0.0)
        tsum(y).backward()
        np.testing.assert_array_equal(token.grad, np.full(3, 4.0))  # 2 masked sites x 2 batch

    def test_masked_patch_mse_brute_force(self, rng):
        pred = rng.normal(size=(2, 6, 5))
        targ = rng.normal(size=(2, 6, 5))
        masked = np.array([True, False, True, True, False, False])
        out = masked_patch_mse(Tensor(pred), Tensor(targ), masked).item()
        acc = []
        for n in range(2):
            for i in np.flatnonzero(masked):
                acc.append(((pred[n, i] - targ[n, i]) ** 2).mean())
        assert abs(out - np.mean(acc)) < 1e-12

    def test_masked_patch_mse_empty_mask_errors(self, rng):
        with pytest.raises(MaskError):
            masked_patch_mse(
                Tensor(rng.normal(size=(1, 3, 2))), Tensor(rng.normal(size=(1, 3, 2))), np.zeros(3, bool)
            )

    def test_masked_patch_mse_gradient(self, rng):
        pred = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
        targ = Tensor(rng.normal(size=(2, 4, 3)))
        masked = np.array([True, False, True, False])
        check_grads(lambda: masked_patch_mse(pred, targ, masked), {"pred": pred})

    def test_reshape_transpose_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        t = Tensor(rng.normal(size=(4, 6)))
        check_grads(lambda: mse_mean(reshape(transpose(x, (2, 0, 1)), (4, 6)), t), {"x": x})


class TestComposedGraph:
    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_small_composed_network_gradcheck(self, seed):
        r = np.random.default_rng(seed)
        x = Tensor(r.normal(size=(1, 2, 6, 6)), requires_grad=True)
        w1 = Tensor(r.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True)
        b1 = Tensor(r.normal(size=3) * 0.1, requires_grad=True)
        g1 = Tensor(np.ones(3), requires_grad=True)
        be1 = Tensor(np.zeros(3), requires_grad=True)
        t = Tensor(r.normal(size=(1, 3, 6, 6)))

        def loss():
            h = conv2d(x, w1, b1, padding=1)
            h = layer_norm_channels(h, g1, be1)
            h = gelu(h)
            return mse_mean(h, t)

        check_grads(loss, {"x": x, "w1": w1, "b1": b1, "g1": g1, "be1": be1}, tol=1e-5)
