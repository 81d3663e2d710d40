import logging
import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from models.kernels import KernelBlocks
from models.skr import standard_normal
from util.autodiff import gaussian_reparam_sample
from util.errors import ShapeMismatch
from util.linalg import CholFactor, cholesky, exp_diag_tril, solve_psd

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-30


@dataclass
class Prediction:
    """Monte-Carlo softmax prediction of the output GP."""
    probs: torch.Tensor       # [P_t, classes]
    log_probs: torch.Tensor   # [P_t, classes], log of the MC-averaged softmax
    logits: torch.Tensor      # [n_mc, P_t, classes]
    mean: torch.Tensor        # [P_t, classes]
    var: torch.Tensor         # [P_t], shared across classes


def output_gp_predict(
    k_flat: KernelBlocks,
    mu: torch.Tensor,
    sigma_lower: torch.Tensor,
    n_mc: int,
    rng: Optional[torch.Generator],
    k_factor: Optional[CholFactor] = None,
) -> Prediction:
    """
    Predictive mean K_ti K_ii⁻¹ μ_λ and variance
    diag(K_tt − K_ti K_ii⁻¹ K_it + K_ti K_ii⁻¹ Σ K_ii⁻¹ K_it), followed by n_mc reparameterised
    logit draws per datapoint and a Monte-Carlo average of the softmax.
    ``sigma_lower`` is any L_Σ with Σ = L_Σ L_Σᵀ (zero is allowed).
    """
    if n_mc < 1:
        raise ValueError(f"n_mc must be >= 1, got {n_mc}")
    if k_flat.shape.S != 1:
        raise ShapeMismatch(f"Output GP needs flat blocks, got spatial size {k_flat.shape.S}")
    if mu.shape[0] != k_flat.num_inducing:
        raise ShapeMismatch(f"μ has {mu.shape[0]} rows for {k_flat.num_inducing} inducing points")

    factor = k_factor if k_factor is not None else cholesky(k_flat.ii)
    k_ti = k_flat.ti[:, :, 0, 0]
    a = solve_psd(factor, k_ti.T)                      # K_ii⁻¹ K_it, [P_i, P_t]
    mean = a.T @ mu
    resid = (k_flat.tt_diag.reshape(-1) - (k_ti * a.T).sum(1)).clamp_min(0.0)
    var = resid + ((sigma_lower.T @ a) ** 2).sum(0)

    std = var.clamp_min(VARIANCE_FLOOR).sqrt()
    noise = standard_normal((n_mc, *mean.shape), rng, mean)
    logits = gaussian_reparam_sample(mean, std[:, None], noise)
    log_probs = torch.logsumexp(torch.log_softmax(logits, dim=-1), dim=0) - math.log(n_mc)
    return Prediction(torch.exp(log_probs), log_probs, logits, mean, var)


class OutputHead(nn.Module):
    """
    Variational posterior over the top-layer inducing outputs: one mean column per class
    and a single covariance Σ = L_Σ L_Σᵀ shared across classes.

    L_Σ = A M with A a fixed lower-triangular anchor (set by ``set_sigma``) and M the learned
    factor ``sigma_factor`` with an exp-mapped diagonal, zero at the anchor.
    """
    def __init__(self, num_inducing: int, num_classes: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.num_inducing = num_inducing
        self.num_classes = num_classes
        self.mu = nn.Parameter(torch.zeros(num_inducing, num_classes, dtype=dtype))
        self.sigma_factor = nn.Parameter(torch.zeros(num_inducing, num_inducing, dtype=dtype))
        self.register_buffer("sigma_anchor", torch.eye(num_inducing, dtype=dtype))

    def sigma_cholesky(self) -> CholFactor:
        return CholFactor(self.sigma_anchor @ exp_diag_tril(self.sigma_factor))

    @torch.no_grad()
    def set_sigma(self, sigma: torch.Tensor) -> None:
        self.sigma_anchor.copy_(cholesky(sigma).lower)
        self.sigma_factor.zero_()

    def predict(self, k_flat: KernelBlocks, n_mc: int, rng: Optional[torch.Generator],
                k_factor: Optional[CholFactor] = None) -> Prediction:
        return output_gp_predict(k_flat, self.mu, self.sigma_cholesky().lower, n_mc, rng, k_factor)
