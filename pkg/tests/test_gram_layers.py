import math

import numpy as np
import pytest
import torch
from torch.testing import assert_close

from conftest import random_spd
from models.gram_layers import DKMLayer, conv_mix, initial_gram, propagate_gram, spatial_pool
from models.kernels import KernelBlocks
from util.errors import ShapeMismatch


def feature_blocks(x_i: torch.Tensor, x_t: torch.Tensor, shape=None, pairs: bool = False) -> KernelBlocks:
    """
    Kernel blocks of a linear kernel on features. x_t rows are ordered (image, row, column)
    and ``shape`` = (P_t, H, W) lays them out spatially.
    """
    p_t, h, w = shape if shape is not None else (x_t.shape[0], 1, 1)
    ti = (x_t @ x_i.T).reshape(p_t, h, w, -1).permute(0, 3, 1, 2)
    tt = (x_t * x_t).sum(1).reshape(p_t, h, w)
    tt_pairs = None
    if pairs:
        per_image = x_t.reshape(p_t, h * w, -1)
        tt_pairs = per_image @ per_image.transpose(1, 2)
    return KernelBlocks(x_i @ x_i.T, ti, tt, tt_pairs)


def dense_conditional(k_ii, k_ti, k_tt, g_tilde):
    """Full conditional Gram K_tt − K_ti K_ii⁻¹ K_it + K_ti K_ii⁻¹ g̃ K_ii⁻¹ K_it."""
    proj = np.linalg.solve(k_ii, k_ti.T).T
    return k_tt - proj @ k_ti.T + proj @ g_tilde @ proj.T, proj


def pair_patch_oracle(pairs: np.ndarray, h: int, w: int, kh: int, kw: int, stride: int) -> np.ndarray:
    ph, pw = kh // 2, kw // 2
    oh, ow = math.ceil(h / stride), math.ceil(w / stride)
    out = np.zeros((pairs.shape[0], oh * ow, oh * ow))
    for r in range(oh * ow):
        for s in range(oh * ow):
            (ri, rj), (si, sj) = divmod(r, ow), divmod(s, ow)
            for dh in range(kh):
                for dw in range(kw):
                    a = (ri * stride + dh - ph, rj * stride + dw - pw)
                    b = (si * stride + dh - ph, sj * stride + dw - pw)
                    if 0 <= a[0] < h and 0 <= a[1] < w and 0 <= b[0] < h and 0 <= b[1] < w:
                        out[:, r, s] += pairs[:, a[0] * w + a[1], b[0] * w + b[1]]
    return out / (kh * kw)


class TestInitialGram:
    def test_scaled_dot_products(self, gen):
        x_t = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
        x_i = torch.randn(5, 3, generator=gen, dtype=torch.float64)
        g = initial_gram(x_t, x_i)
        assert_close(g.ii, x_i @ x_i.T / 3)
        assert_close(g.ti[1, :, 2, 3], x_i @ x_t[1, :, 2, 3] / 3)
        assert_close(g.tt_diag[0, 1, 1], x_t[0, :, 1, 1].dot(x_t[0, :, 1, 1]) / 3)
        assert g.tt_pairs is None

    def test_location_pairs(self, gen):
        x_t = torch.randn(2, 3, 2, 3, generator=gen, dtype=torch.float64)
        g = initial_gram(x_t, torch.randn(4, 3, generator=gen, dtype=torch.float64), location_pairs=True)
        assert tuple(g.tt_pairs.shape) == (2, 6, 6)
        # location (0, 2) is flat index 2, location (1, 1) is flat index 4
        assert g.tt_pairs[1, 2, 4].item() == pytest.approx(x_t[1, :, 0, 2].dot(x_t[1, :, 1, 1]).item() / 3)
        assert_close(torch.diagonal(g.tt_pairs, dim1=1, dim2=2), g.tt_diag.reshape(2, 6))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatch):
            initial_gram(torch.zeros(1, 3, 2, 2), torch.zeros(4, 2))


class TestConvMix:
    def test_single_offset_identity(self, gen):
        phi = feature_blocks(torch.randn(3, 4, generator=gen, dtype=torch.float64),
                             torch.randn(2 * 9, 4, generator=gen, dtype=torch.float64), (2, 3, 3))
        out = conv_mix(phi, torch.eye(3, dtype=torch.float64).view(3, 3, 1, 1))
        assert_close(out.ii, phi.ii)
        assert_close(out.ti, phi.ti)
        assert_close(out.tt_diag, phi.tt_diag)

    def test_constant_tt_in_interior(self, gen):
        phi = KernelBlocks(torch.eye(2, dtype=torch.float64), torch.zeros(1, 2, 5, 5, dtype=torch.float64),
                           torch.full((1, 5, 5), 2.0, dtype=torch.float64))
        out = conv_mix(phi, torch.randn(2, 2, 3, 3, generator=gen, dtype=torch.float64))
        assert_close(out.tt_diag[0, 1:4, 1:4], torch.full((3, 3), 2.0, dtype=torch.float64))
        # zero padding at the border
        assert out.tt_diag[0, 0, 0].item() == pytest.approx(2.0 * 4 / 9)

    def test_one_dimensional_patch_brute_force(self, gen):
        p, width = 2, 3
        phi = feature_blocks(torch.randn(p, 4, generator=gen, dtype=torch.float64),
                             torch.randn(width, 4, generator=gen, dtype=torch.float64), (1, 1, width))
        c = torch.randn(p, p, 1, 3, generator=gen, dtype=torch.float64)
        out = conv_mix(phi, c)

        ii = sum(c[:, :, 0, d] @ phi.ii @ c[:, :, 0, d].T for d in range(3)) / 3
        assert_close(out.ii, ii)
        for r in range(width):
            ti = torch.zeros(p, dtype=torch.float64)
            tt = 0.0
            for d in range(3):
                src = r + d - 1
                if 0 <= src < width:
                    ti = ti + c[:, :, 0, d] @ phi.ti[0, :, 0, src]
                    tt = tt + phi.tt_diag[0, 0, src].item()
            assert_close(out.ti[0, :, 0, r], ti / 3)
            assert out.tt_diag[0, 0, r].item() == pytest.approx(tt / 3, rel=1e-12)

    def test_ones_mixup_single_inducing(self):
        phi = KernelBlocks(torch.tensor([[2.0]], dtype=torch.float64),
                           torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64).view(1, 1, 1, 3),
                           torch.tensor([1.0, 4.0, 9.0], dtype=torch.float64).view(1, 1, 3))
        out = conv_mix(phi, torch.ones(1, 1, 1, 3, dtype=torch.float64))
        assert out.ii.item() == pytest.approx(2.0)
        assert_close(out.ti.view(-1), torch.tensor([1.0, 2.0, 5.0 / 3.0], dtype=torch.float64))
        assert_close(out.tt_diag.view(-1), torch.tensor([5.0 / 3.0, 14.0 / 3.0, 13.0 / 3.0], dtype=torch.float64))

    @pytest.mark.parametrize("h,w,kernel,stride", [(1, 4, (1, 3), 1), (4, 4, (3, 3), 1), (5, 4, (3, 3), 2)])
    def test_location_pairs_brute_force(self, gen, h, w, kernel, stride):
        phi = feature_blocks(torch.randn(3, 5, generator=gen, dtype=torch.float64),
                             torch.randn(2 * h * w, 5, generator=gen, dtype=torch.float64), (2, h, w), pairs=True)
        out = conv_mix(phi, torch.randn(4, 3, *kernel, generator=gen, dtype=torch.float64), stride=stride)
        expected = pair_patch_oracle(phi.tt_pairs.numpy(), h, w, *kernel, stride)
        np.testing.assert_allclose(out.tt_pairs.numpy(), expected, rtol=1e-12, atol=1e-12)
        assert_close(torch.diagonal(out.tt_pairs, dim1=1, dim2=2), out.tt_diag.reshape(2, -1))

    def test_stride_halves_spatial_size(self, gen):
        phi = feature_blocks(torch.randn(3, 4, generator=gen, dtype=torch.float64),
                             torch.randn(16, 4, generator=gen, dtype=torch.float64), (1, 4, 4))
        out = conv_mix(phi, torch.randn(5, 3, 3, 3, generator=gen, dtype=torch.float64), stride=2)
        assert tuple(out.ti.shape) == (1, 5, 2, 2)
        assert tuple(out.tt_diag.shape) == (1, 2, 2)

    def test_even_kernel_rejected(self):
        phi = KernelBlocks(torch.eye(2), torch.zeros(1, 2, 3, 3), torch.ones(1, 3, 3))
        with pytest.raises(ShapeMismatch):
            conv_mix(phi, torch.ones(2, 2, 2, 2))


class TestPropagateGram:
    def test_prior_gram_collapses_to_prior(self, gen):
        k = feature_blocks(torch.randn(3, 6, generator=gen, dtype=torch.float64),
                           torch.randn(4, 6, generator=gen, dtype=torch.float64))
        g = propagate_gram(k, k.ii)
        assert_close(g.ti, k.ti)
        assert_close(g.tt_diag, k.tt_diag)
        assert g.tt_pairs is None

    def test_zero_cross_row(self, gen):
        k = feature_blocks(torch.randn(3, 6, generator=gen, dtype=torch.float64),
                           torch.randn(2, 6, generator=gen, dtype=torch.float64))
        k.ti[1].zero_()
        g = propagate_gram(k, random_spd(3, gen))
        assert torch.equal(g.ti[1], torch.zeros_like(g.ti[1]))
        assert g.tt_diag[1].item() == pytest.approx(k.tt_diag[1].item())

    def test_dense_conditional_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            feats = rng.normal(size=(5, 7))
            joint = feats @ feats.T
            k_ii, k_ti, k_tt = joint[:3, :3], joint[3:, :3], joint[3:, 3:]
            a = rng.normal(size=(3, 3))
            g_tilde = a @ a.T + 0.1 * np.eye(3)
            expected_tt, proj = dense_conditional(k_ii, k_ti, k_tt, g_tilde)

            k = KernelBlocks(torch.from_numpy(k_ii), torch.from_numpy(k_ti)[:, :, None, None],
                             torch.from_numpy(np.diag(k_tt).copy())[:, None, None])
            g = propagate_gram(k, torch.from_numpy(g_tilde))
            np.testing.assert_allclose(g.ti[:, :, 0, 0].numpy(), proj @ g_tilde, atol=1e-10, rtol=1e-10)
            np.testing.assert_allclose(g.tt_diag[:, 0, 0].numpy(), np.diag(expected_tt), atol=1e-10, rtol=1e-10)

    def test_location_pairs_dense_oracle(self):
        rng = np.random.default_rng(11)
        feats = rng.normal(size=(3 + 2 * 3, 8))
        x_i, x_t = feats[:3], feats[3:]
        a = rng.normal(size=(3, 3))
        g_tilde = a @ a.T + 0.1 * np.eye(3)

        k = feature_blocks(torch.from_numpy(x_i), torch.from_numpy(x_t), (2, 1, 3), pairs=True)
        g = propagate_gram(k, torch.from_numpy(g_tilde))
        for image in range(2):
            rows = x_t[3 * image:3 * image + 3]
            expected, _ = dense_conditional(x_i @ x_i.T, rows @ x_i.T, rows @ rows.T, g_tilde)
            np.testing.assert_allclose(g.tt_pairs[image].numpy(), expected, rtol=1e-9, atol=1e-10)

    def test_shape_mismatch(self, gen):
        k = feature_blocks(torch.randn(3, 6, generator=gen, dtype=torch.float64),
                           torch.randn(2, 6, generator=gen, dtype=torch.float64))
        with pytest.raises(ShapeMismatch):
            propagate_gram(k, torch.eye(2, dtype=torch.float64))


class TestSpatialPool:
    def test_single_location_matches_propagation(self, gen):
        k = feature_blocks(torch.randn(3, 6, generator=gen, dtype=torch.float64),
                           torch.randn(4, 6, generator=gen, dtype=torch.float64))
        g_tilde = random_spd(3, gen)
        g = propagate_gram(k, g_tilde)
        flat = spatial_pool(k, g_tilde)
        assert_close(flat.ti, g.ti)
        assert_close(flat.tt_diag, g.tt_diag)
        assert torch.equal(flat.ii, g_tilde)

    def test_constant_locations(self, gen):
        x_i = torch.randn(3, 6, generator=gen, dtype=torch.float64)
        x_t = torch.randn(1, 6, generator=gen, dtype=torch.float64)
        g_tilde = random_spd(3, gen)
        single = spatial_pool(feature_blocks(x_i, x_t), g_tilde)
        tiled = spatial_pool(feature_blocks(x_i, x_t.repeat(4, 1), (1, 2, 2)), g_tilde)
        assert_close(tiled.ti, single.ti)

    @pytest.mark.parametrize("h,w", [(1, 2), (2, 2), (2, 3)])
    def test_full_gram_double_sum_oracle(self, h, w):
        rng = np.random.default_rng(3)
        s = h * w
        feats = rng.normal(size=(3 + 2 * s, 8))
        x_i, x_t = feats[:3], feats[3:]
        a = rng.normal(size=(3, 3))
        g_tilde = a @ a.T + 0.1 * np.eye(3)

        exact = spatial_pool(feature_blocks(torch.from_numpy(x_i), torch.from_numpy(x_t), (2, h, w), pairs=True),
                             torch.from_numpy(g_tilde))
        diagonal_only = spatial_pool(feature_blocks(torch.from_numpy(x_i), torch.from_numpy(x_t), (2, h, w)),
                                     torch.from_numpy(g_tilde))
        for image in range(2):
            rows = x_t[s * image:s * (image + 1)]
            k_ti = rows @ x_i.T
            full, proj = dense_conditional(x_i @ x_i.T, k_ti, rows @ rows.T, g_tilde)
            np.testing.assert_allclose(exact.ti[image, :, 0, 0].numpy(), proj.mean(0) @ g_tilde,
                                       rtol=1e-10, atol=1e-12)
            assert exact.tt_diag[image].item() == pytest.approx(full.mean(), rel=1e-9)

            # without location pairs, conditional residuals at different locations are dropped
            inducing_part = proj @ g_tilde @ proj.T
            resid = full - inducing_part
            assert diagonal_only.tt_diag[image].item() == pytest.approx(
                inducing_part.mean() + np.trace(resid) / s ** 2, rel=1e-9)
        assert exact.shape.S == 1
        assert tuple(exact.tt_pairs.shape) == (2, 1, 1)


class TestDKMLayer:
    def test_set_gram_round_trip(self, gen):
        layer = DKMLayer(4, 4)
        g = random_spd(4, gen)
        layer.set_gram(g)
        assert_close(layer.cholesky_factor().reconstruct(), g, atol=1e-12, rtol=1e-12)
        assert torch.equal(layer.gram_factor.detach(), torch.zeros(4, 4, dtype=torch.float64))

    def test_zero_factor_is_identity(self):
        assert_close(DKMLayer(3, 3).cholesky_factor().reconstruct(), torch.eye(3, dtype=torch.float64))

    def test_factor_steps_are_relative_to_the_anchor(self, gen):
        layer = DKMLayer(5, 5)
        g = 1e-4 * random_spd(5, gen)
        layer.set_gram(g)
        with torch.no_grad():
            layer.gram_factor.add_(0.01 * torch.sign(torch.randn(5, 5, generator=gen, dtype=torch.float64)))
        moved = layer.cholesky_factor().reconstruct()
        assert float(torch.linalg.norm(moved - g) / torch.linalg.norm(g)) < 0.2

    def test_fc_equal_widths_has_no_mixup(self):
        assert DKMLayer(4, 4, "fc").mixup is None
        assert tuple(DKMLayer(4, 6, "fc").mixup.shape) == (6, 4, 1, 1)

    def test_conv_mixup_shape(self, gen):
        layer = DKMLayer(4, 8, "conv", kernel_size=3, stride=2, generator=gen)
        assert tuple(layer.mixup.shape) == (8, 4, 3, 3)

    def test_skip_logit_only_on_skip_layers(self):
        assert DKMLayer(2, 2, skip=True).alpha().item() == pytest.approx(0.5)
        plain = DKMLayer(2, 2)
        assert plain.skip_logit is None
        assert "skip_logit" not in dict(plain.named_parameters())
        with pytest.raises(ValueError):
            plain.alpha()

    def test_invalid_fc_kernel(self):
        with pytest.raises(ValueError):
            DKMLayer(2, 2, "fc", kernel_size=3)
