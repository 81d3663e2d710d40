"""Stochastic kernel regularisation: Wishart resampling of inducing Grams."""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import torch

from util.linalg import CholFactor, cholesky, symmetrize

logger = logging.getLogger(__name__)

PSD_CHECK_JITTER = 1e-10


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class RegConfig:
    """
    gamma: Wishart degrees of freedom; 0 selects max(1, P_i // 4) per layer.
    jitter: λ added to the sample during training and to G_ii at evaluation.
    """
    gamma: int = 0
    jitter: float = 0.1
    enabled: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 1 (or 0 for automatic), got {self.gamma}")
        if not math.isfinite(self.jitter) or self.jitter < 0:
            raise ValueError(f"jitter must be finite and non-negative, got {self.jitter}")

    def gamma_for(self, num_inducing: int) -> int:
        return self.gamma if self.gamma > 0 else max(1, num_inducing // 4)

    @classmethod
    def from_config(cls, config: dict) -> "RegConfig":
        return cls(
            gamma=int(config["reg.gamma"]),
            jitter=float(config["reg.jitter"]),
            enabled=bool(config["reg.enabled"]),
        )


def make_generator(seed: int, device: str = "cpu") -> torch.Generator:
    gen = torch.Generator(device=device)
    gen.manual_seed(int(seed))
    return gen


def standard_normal(shape, rng: Optional[torch.Generator], like: torch.Tensor) -> torch.Tensor:
    """
    N(0, 1) draws in double precision cast to the dtype of ``like``, so a seeded run sees
    the same noise in single and double precision.
    """
    z = torch.randn(*shape, generator=rng, dtype=torch.float64, device=like.device)
    return z.to(like.dtype)


def skr_sample(
    g_ii: torch.Tensor,
    cfg: RegConfig,
    rng: Optional[torch.Generator],
    mode: Mode,
    factor: Optional[CholFactor] = None,
) -> torch.Tensor:
    """
    Training: (1/γ) Σ_k a_k a_kᵀ + λI with a_k = L z_k, z_k ~ N(0, I), L Lᵀ = g_ii.
    Evaluation or disabled: g_ii + λI.
    ``factor`` may supply L directly (the learned Cholesky factor of G_ii).
    """
    eye = torch.eye(g_ii.shape[0], dtype=g_ii.dtype, device=g_ii.device)
    if mode == Mode.EVAL or not cfg.enabled:
        return g_ii + cfg.jitter * eye

    if factor is None:
        factor = cholesky(g_ii, PSD_CHECK_JITTER)
    gamma = cfg.gamma_for(g_ii.shape[0])
    z = standard_normal((g_ii.shape[0], gamma), rng, g_ii)
    a = factor.lower @ z
    return symmetrize(a @ a.T) / gamma + cfg.jitter * eye


def sample_variance_scale(gamma: int) -> float:
    if gamma < 1:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    return 1.0 / gamma
