import numpy as np
import pytest
import torch
from scipy.linalg import solve
from torch.testing import assert_close

from conftest import random_spd, toy_model
from models.conv_dkm import ConvDKM, LayerSpec, ModelConfig, layer_specs
from models.kernels import KernelKind
from models.skr import Mode, RegConfig, make_generator
from trainers.objective import ObjectiveConfig, assemble_objective
from util.errors import NumericalFailure, ShapeMismatch


def sq_exp_dense(g: np.ndarray) -> np.ndarray:
    d = np.diag(g)
    return np.exp(-(d[:, None] + d[None, :] - 2.0 * g) / 2.0)


@pytest.fixture
def points(gen):
    x = 3.0 * torch.randn(12, 2, generator=gen, dtype=torch.float64)
    return x[:, :, None, None]


class TestNNGPReduction:
    def test_prior_grams_match_kernel_composition(self, gen, points):
        model = toy_model("sq_exp", layers=(LayerSpec("fc", 4), LayerSpec("fc", 4)), input_inducing=4,
                          reg=RegConfig(gamma=0, jitter=0.0, enabled=False), kernel_jitter=0.0,
                          batch_kernel_norm=False)
        x_train, x_test = points[:8], points[8:]
        model.initialise(x_train, make_generator(0))
        mu = torch.randn(4, 2, generator=gen, dtype=torch.float64)
        sigma = random_spd(4, gen)
        with torch.no_grad():
            model.head.mu.copy_(mu)
        model.head.set_sigma(sigma)

        with torch.no_grad():
            pred = model(x_test, Mode.EVAL, make_generator(1), n_mc=1).prediction

        x_i = model.inducing_inputs.detach().numpy()
        z = np.vstack([x_i, x_test[:, :, 0, 0].numpy()])
        k = z @ z.T / 2.0
        for _ in range(model.depth + 1):
            k = sq_exp_dense(k)
        k_ii, k_ti, k_tt = k[:4, :4], k[4:, :4], np.diag(k[4:, 4:])
        proj = solve(k_ii, k_ti.T, assume_a="pos").T
        s = sigma.numpy()
        expected_mean = proj @ mu.numpy()
        expected_var = k_tt - np.einsum("ij,ij->i", proj, k_ti) + np.einsum("ij,jk,ik->i", proj, s, proj)

        np.testing.assert_allclose(pred.mean.numpy(), expected_mean, atol=1e-8, rtol=1e-8)
        np.testing.assert_allclose(pred.var.numpy(), expected_var, atol=1e-8, rtol=1e-8)

    def test_initialise_sets_grams_to_prior(self, points):
        model = toy_model("sq_exp", reg=RegConfig(gamma=0, jitter=0.0, enabled=False))
        model.initialise(points, make_generator(0))
        with torch.no_grad():
            result = model(points, Mode.EVAL, make_generator(0))
        rec = result.layers[0]
        assert_close(rec.g_ii, rec.k_ii, atol=1e-12, rtol=1e-10)
        assert_close(model.head.sigma_cholesky().reconstruct(), result.k_flat.ii, atol=1e-12, rtol=1e-10)
        assert torch.equal(model.head.mu.detach(), torch.zeros_like(model.head.mu))


class TestBatchIndependence:
    @pytest.fixture
    def model(self, points):
        m = toy_model("normalised_gaussian")
        m.initialise(points, make_generator(0))
        with torch.no_grad():
            m.head.mu.normal_(generator=make_generator(5))
        return m

    def test_permutation_equivariant(self, model, points):
        perm = torch.randperm(points.shape[0], generator=make_generator(3))
        with torch.no_grad():
            base = model(points, Mode.EVAL, make_generator(0)).prediction
            permuted = model(points[perm], Mode.EVAL, make_generator(0)).prediction
        assert_close(permuted.mean, base.mean[perm], atol=1e-12, rtol=1e-10)
        assert_close(permuted.var, base.var[perm], atol=1e-12, rtol=1e-10)

    def test_duplicated_batch(self, model, points):
        with torch.no_grad():
            base = model(points, Mode.EVAL, make_generator(0)).prediction
            doubled = model(torch.cat([points, points]), Mode.EVAL, make_generator(0)).prediction
        n = points.shape[0]
        assert_close(doubled.mean[:n], base.mean, atol=1e-12, rtol=1e-10)
        assert_close(doubled.mean[n:], base.mean, atol=1e-12, rtol=1e-10)


class TestForward:
    def test_depth_zero(self, points):
        model = toy_model("sq_exp", layers=())
        model.initialise(points, make_generator(0))
        result = model(points, Mode.TRAIN, make_generator(1), n_mc=3)
        assert result.layers == []
        assert tuple(result.probs.shape) == (12, 2)
        assert result.k_flat.shape.S == 1

    def test_convolutional_model_trains_end_to_end(self, gen):
        config = ModelConfig(
            KernelKind("normalised_gaussian"), input_channels=2, input_inducing=4, num_classes=3,
            layers=(LayerSpec("conv", 4, 3, 1), LayerSpec("conv", 5, 3, 2), LayerSpec("conv", 5, 3, 1)),
            skips=((1, 1),),
        )
        model = ConvDKM(config, RegConfig(gamma=0, jitter=0.1), generator=gen)
        x = torch.randn(6, 2, 4, 4, generator=gen, dtype=torch.float64)
        labels = torch.tensor([0, 1, 2, 0, 1, 2])
        model.initialise(x, gen)

        result = model(x, Mode.TRAIN, gen, n_mc=4)
        assert len(result.layers) == 3
        assert_close(result.probs.sum(1), torch.ones(6, dtype=torch.float64))
        conds = result.sample_condition_numbers()
        assert len(conds) == 3
        assert all(np.isfinite(c) and c >= 1.0 for c in conds)

        terms = assemble_objective(result, labels, ObjectiveConfig(nu=(1e-3,)), 6, model.head)
        terms.loss.backward()
        params = dict(model.named_parameters())
        # only layer 1 closes a skip
        assert "layers.0.skip_logit" in params
        assert "layers.1.skip_logit" not in params and "layers.2.skip_logit" not in params
        for name, param in params.items():
            assert param.grad is not None, name
            assert bool(torch.isfinite(param.grad).all()), name

    def test_failure_names_layer(self):
        model = toy_model("normalised_gaussian")
        with pytest.raises(NumericalFailure) as info:
            model(torch.ones(3, 2, 1, 1, dtype=torch.float64))
        assert info.value.layer == 1

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatch):
            toy_model()(torch.ones(3, 5, 1, 1, dtype=torch.float64))

    def test_single_precision(self, points):
        config = ModelConfig(KernelKind("sq_exp"), 2, 6, 2, (LayerSpec("fc", 6),))
        model = ConvDKM(config, RegConfig(), dtype=torch.float32)
        model.initialise(points.float(), make_generator(0))
        result = model(points.float(), Mode.TRAIN, make_generator(0), n_mc=2)
        assert result.probs.dtype == torch.float32


class TestLocationPairs:
    def test_vector_inputs_unchanged(self, points):
        results = []
        for pairs in (False, True):
            model = toy_model("sq_exp", layers=(LayerSpec("fc", 6), LayerSpec("fc", 6)), location_pairs=pairs)
            model.initialise(points, make_generator(0))
            with torch.no_grad():
                results.append(model(points, Mode.EVAL, make_generator(1)).prediction)
        assert_close(results[1].mean, results[0].mean, atol=1e-10, rtol=1e-8)
        assert_close(results[1].var, results[0].var, atol=1e-10, rtol=1e-8)

    def test_convolutional_model_with_pairs(self, gen):
        config = ModelConfig(
            KernelKind("normalised_gaussian"), input_channels=2, input_inducing=4, num_classes=3,
            layers=(LayerSpec("conv", 4, 3, 1), LayerSpec("conv", 4, 3, 2), LayerSpec("conv", 5, 3, 1)),
            skips=((1, 1),), location_pairs=True,
        )
        model = ConvDKM(config, RegConfig(gamma=0, jitter=0.1), generator=gen)
        x = torch.randn(5, 2, 4, 4, generator=gen, dtype=torch.float64)
        model.initialise(x, gen)
        result = model(x, Mode.TRAIN, gen, n_mc=4)
        assert tuple(result.k_flat.tt_pairs.shape) == (5, 1, 1)
        assert_close(result.probs.sum(1), torch.ones(5, dtype=torch.float64))

        terms = assemble_objective(result, torch.tensor([0, 1, 2, 0, 1]), ObjectiveConfig(nu=(1e-3,)), 5, model.head)
        terms.loss.backward()
        assert bool(torch.isfinite(model.layers[0].gram_factor.grad).all())


class TestInitialise:
    @pytest.fixture
    def images(self, gen):
        return torch.rand(6, 2, 4, 4, generator=gen, dtype=torch.float64)

    @staticmethod
    def conv_model(seed: int = 0) -> ConvDKM:
        config = ModelConfig(KernelKind("sq_exp"), input_channels=2, input_inducing=5, num_classes=2,
                             layers=(LayerSpec("conv", 5, 3, 1), LayerSpec("conv", 5, 3, 1)))
        return ConvDKM(config, RegConfig(gamma=0, jitter=0.1), generator=make_generator(seed))

    def test_patch_means(self, images):
        means = self.conv_model()._patch_means(images).reshape(6, 4, 4, 2)
        for i in range(4):
            for j in range(4):
                window = images[:, :, max(i - 1, 0):i + 2, max(j - 1, 0):j + 2]
                assert_close(means[:, i, j], window.mean(dim=(2, 3)))

    def test_inducing_inputs_are_patch_centroids(self, images):
        model = self.conv_model()
        model.initialise(images, make_generator(3))
        means = model._patch_means(images)
        inducing = model.inducing_inputs.detach()
        assert bool((inducing >= means.min(0).values - 1e-12).all())
        assert bool((inducing <= means.max(0).values + 1e-12).all())
        assert torch.unique(inducing, dim=0).shape[0] == 5

        again = self.conv_model()
        again.initialise(images, make_generator(3))
        assert torch.equal(again.inducing_inputs.detach(), inducing)

    def test_vector_inputs_take_training_points(self, points):
        model = toy_model("sq_exp")
        model.initialise(points, make_generator(0))
        train = points[:, :, 0, 0]
        for row in model.inducing_inputs.detach():
            assert bool((train == row).all(1).any())


class TestModelConfig:
    def test_skip_cannot_reach_final_layer(self):
        with pytest.raises(ValueError):
            ModelConfig(KernelKind("sq_exp"), 2, 4, 2, (LayerSpec("fc", 4), LayerSpec("fc", 4)), skips=((1, 2),))

    def test_skip_widths_must_agree(self):
        with pytest.raises(ValueError):
            ModelConfig(KernelKind("sq_exp"), 2, 4, 2, (LayerSpec("fc", 6), LayerSpec("fc", 6)), skips=((1, 1),))

    def test_layer_specs_length_check(self):
        with pytest.raises(ValueError):
            layer_specs(["conv", "conv"], [4], [3, 3], [1, 1])
