import numpy as np
import pytest
import torch

from models.conv_dkm import ConvDKM, LayerSpec, ModelConfig
from models.kernels import KernelKind
from models.skr import RegConfig


def random_spd(n: int, generator: torch.Generator, eps: float = 1e-1, dtype=torch.float64) -> torch.Tensor:
    a = torch.randn(n, n, generator=generator, dtype=dtype)
    return a @ a.T / n + eps * torch.eye(n, dtype=dtype)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_model(kernel: str = "sq_exp", layers=(LayerSpec("fc", 6),), input_inducing: int = 6,
              reg: RegConfig = RegConfig(gamma=0, jitter=0.1), kernel_jitter: float = 1e-6,
              batch_kernel_norm: bool = True, num_classes: int = 2, input_channels: int = 2,
              skips=(), seed: int = 0, location_pairs: bool = False) -> ConvDKM:
    config = ModelConfig(KernelKind(kernel), input_channels, input_inducing, num_classes, tuple(layers),
                         skips=tuple(skips), kernel_jitter=kernel_jitter, batch_kernel_norm=batch_kernel_norm,
                         location_pairs=location_pairs)
    return ConvDKM(config, reg, generator=torch.Generator().manual_seed(seed))
