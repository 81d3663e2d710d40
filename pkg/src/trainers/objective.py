"""
Sparse DKM objective: expected categorical log-likelihood minus the per-layer Gram
regularisers and the output-layer KL, all per datapoint.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch

from models.conv_dkm import ForwardResult
from models.output_head import OutputHead
from util.autodiff import frobenius_norm_sq, softmax_log_likelihood, trace
from util.errors import ShapeMismatch
from util.linalg import CholFactor, cholesky, solve_psd

logger = logging.getLogger(__name__)

KL_MODES = ("exact", "taylor")


@dataclass(frozen=True)
class ObjectiveConfig:
    """``nu`` holds one strength per layer, or a single value shared by every layer."""
    nu: Tuple[float, ...] = (1e-3,)
    kl_mode: str = "taylor"
    mc_samples_train: int = 8

    def __post_init__(self):
        if self.kl_mode not in KL_MODES:
            raise ValueError(f"Unknown kl_mode: {self.kl_mode}")
        if any(v < 0 for v in self.nu):
            raise ValueError(f"nu must be non-negative, got {self.nu}")
        if self.mc_samples_train < 1:
            raise ValueError(f"mc_samples_train must be >= 1, got {self.mc_samples_train}")

    def nu_for(self, layer: int, depth: int) -> float:
        """Strength for 1-based ``layer`` of a ``depth``-layer model."""
        if len(self.nu) == 1:
            return self.nu[0]
        if len(self.nu) != depth:
            raise ValueError(f"objective.nu has {len(self.nu)} entries for {depth} layers")
        return self.nu[layer - 1]

    @classmethod
    def from_config(cls, config: dict) -> "ObjectiveConfig":
        nu = config["objective.nu"]
        nu = tuple(float(v) for v in nu) if isinstance(nu, (list, tuple)) else (float(nu),)
        return cls(nu=nu, kl_mode=str(config["objective.kl_mode"]),
                   mc_samples_train=int(config["objective.mc_samples_train"]))


def kl_exact_core(g: torch.Tensor, k: torch.Tensor, g_factor: Optional[CholFactor] = None) -> torch.Tensor:
    """Tr(K⁻¹G) − logdet(K⁻¹G) − P, zero at G = K."""
    if g.shape != k.shape:
        raise ShapeMismatch(f"G {tuple(g.shape)} and K {tuple(k.shape)} differ")
    k_factor = cholesky(k)
    g_factor = g_factor if g_factor is not None else cholesky(g)
    return trace(solve_psd(k_factor, g)) - (g_factor.logdet() - k_factor.logdet()) - g.shape[0]


def kl_taylor_core(g: torch.Tensor, k: torch.Tensor, g_factor: Optional[CholFactor] = None) -> torch.Tensor:
    """
    ½‖G⁻¹K − I‖²_F in its symmetric form ½‖L⁻¹ K L⁻ᵀ − I‖²_F with G = L Lᵀ, which has the
    same eigenvalues as G⁻¹K. Only triangular solves against L are used, so the inverse is
    differentiated through the factor of G alone.
    """
    if g.shape != k.shape:
        raise ShapeMismatch(f"G {tuple(g.shape)} and K {tuple(k.shape)} differ")
    lower = (g_factor if g_factor is not None else cholesky(g)).lower
    half = torch.linalg.solve_triangular(lower, k, upper=False)
    whitened = torch.linalg.solve_triangular(lower, half.T, upper=False)
    eye = torch.eye(g.shape[0], dtype=g.dtype, device=g.device)
    return 0.5 * frobenius_norm_sq(whitened - eye)


def kl_core(mode: str, g: torch.Tensor, k: torch.Tensor, g_factor: Optional[CholFactor] = None) -> torch.Tensor:
    if mode == "exact":
        return kl_exact_core(g, k, g_factor)
    if mode == "taylor":
        return kl_taylor_core(g, k, g_factor)
    raise ValueError(f"Unknown kl_mode: {mode}")


def output_kl(mu: torch.Tensor, sigma_factor: CholFactor, k_ii: torch.Tensor) -> torch.Tensor:
    """Σ_λ KL(N(μ_λ, Σ) ‖ N(0, K)) with Σ shared across the class columns of μ."""
    if mu.shape[0] != k_ii.shape[0] or sigma_factor.dim != k_ii.shape[0]:
        raise ShapeMismatch(
            f"μ {tuple(mu.shape)}, Σ dim {sigma_factor.dim} and K {tuple(k_ii.shape)} do not conform"
        )
    p, classes = mu.shape
    k_factor = cholesky(k_ii)
    whitened_sigma = torch.linalg.solve_triangular(k_factor.lower, sigma_factor.lower, upper=False)
    whitened_mu = torch.linalg.solve_triangular(k_factor.lower, mu, upper=False)
    per_class = frobenius_norm_sq(whitened_sigma) - p + k_factor.logdet() - sigma_factor.logdet()
    return 0.5 * (classes * per_class + (whitened_mu * whitened_mu).sum())


@dataclass
class ObjectiveTerms:
    loss: torch.Tensor
    objective: torch.Tensor
    expected_ll: torch.Tensor
    output_kl: torch.Tensor
    layer_kls: List[torch.Tensor]


def assemble_objective(result: ForwardResult, labels: torch.Tensor, cfg: ObjectiveConfig,
                       num_train: int, head: OutputHead) -> ObjectiveTerms:
    """
    Per-datapoint objective
        mean expected log-likelihood − (1/P_train) [output KL + Σ_ℓ ν_ℓ kl_core(G_ii^ℓ, K_ii^ℓ)]
    where each layer core is evaluated on the learned (pre-SKR) G_ii. The returned ``loss``
    is the negated objective.
    """
    if num_train < 1:
        raise ValueError(f"num_train must be positive, got {num_train}")
    expected_ll = softmax_log_likelihood(result.prediction.logits, labels).mean()

    depth = len(result.layers)
    out_kl = output_kl(head.mu, head.sigma_cholesky(), result.k_flat.ii)
    regulariser = out_kl
    layer_kls = []
    for idx, rec in enumerate(result.layers, start=1):
        nu = cfg.nu_for(idx, depth)
        if nu == 0.0:
            layer_kls.append(torch.zeros((), dtype=rec.g_ii.dtype, device=rec.g_ii.device))
            continue
        value = kl_core(cfg.kl_mode, rec.g_ii, rec.k_ii, rec.g_factor)
        layer_kls.append(value)
        regulariser = regulariser + nu * value

    objective = expected_ll - regulariser / num_train
    return ObjectiveTerms(-objective, objective, expected_ll, out_kl, layer_kls)

