"""
Differentiable matrix primitives for the DKM objective, plus a finite-difference checker.

The tape is torch's autograd graph: each primitive below is a composition of torch ops
whose backward rules torch registers as the forward value is computed. Cholesky is
differentiated by torch's triangular backward recurrence.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Tuple, Union

import torch

from util.errors import ShapeMismatch
from util.linalg import CholFactor, cholesky, solve_psd

logger = logging.getLogger(__name__)

ARCCOS_CLAMP = 1e-7

NamedParams = Union[Dict[str, torch.Tensor], Iterable[Tuple[str, torch.Tensor]]]


def trace(a: torch.Tensor) -> torch.Tensor:
    return torch.diagonal(a, dim1=-2, dim2=-1).sum(-1)


def frobenius_norm_sq(a: torch.Tensor) -> torch.Tensor:
    return (a * a).sum(dim=(-2, -1))


def logdet_via_chol(a: torch.Tensor, jitter: float = 0.0) -> torch.Tensor:
    """log det(a) through its Cholesky factor; d logdet(A) = Tr(A⁻¹ dA)."""
    return cholesky(a, jitter).logdet()


def chol_solve(a: Union[torch.Tensor, CholFactor], b: torch.Tensor) -> torch.Tensor:
    """A⁻¹ B for PSD A. Gradients flow into both A (through its factor) and B."""
    factor = a if isinstance(a, CholFactor) else cholesky(a)
    return solve_psd(factor, b)


def safe_arccos(rho: torch.Tensor) -> torch.Tensor:
    return torch.arccos(rho.clamp(-1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP))


def softmax_log_likelihood(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """
    Categorical log-likelihood of integer labels under softmax(logits).
    logits: [..., P, classes]; labels: [P]. Returns [..., P].
    """
    if logits.shape[-2] != labels.shape[0]:
        raise ShapeMismatch(f"{logits.shape[-2]} logit rows for {labels.shape[0]} labels")
    log_probs = torch.log_softmax(logits, dim=-1)
    index = labels.long().expand(*logits.shape[:-1]).unsqueeze(-1)
    return torch.gather(log_probs, -1, index).squeeze(-1)


def gaussian_reparam_sample(mean: torch.Tensor, std: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """
    mean + std * noise with the noise held constant. ``std`` is the square root of the
    per-datapoint variance (a diagonal Cholesky factor), broadcast against ``noise``.
    """
    return mean + std * noise.detach()


def parameter_gradients(loss: torch.Tensor, params: NamedParams) -> Dict[str, torch.Tensor]:
    """
    Gradient of a scalar loss for every named parameter. Parameters that the loss does not
    reach get an exact zero tensor.
    """
    named = list(params.items()) if isinstance(params, dict) else list(params)
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {
        name: torch.zeros_like(p) if g is None else g
        for (name, p), g in zip(named, grads)
    }


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    max_abs_error: float
    finite: bool


@dataclass
class GradCheckReport:
    entries: List[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        if not self.entries:
            return 0.0
        if not all(e.finite for e in self.entries):
            return math.inf
        return max(e.max_rel_error for e in self.entries)

    def passed(self, threshold: float) -> bool:
        return all(e.finite for e in self.entries) and self.max_rel_error < threshold

    def as_table(self) -> str:
        width = max([len(e.name) for e in self.entries] + [9])
        lines = [f"{'parameter':<{width}}  {'max_rel_err':>12}  {'max_abs_err':>12}  finite"]
        for e in self.entries:
            lines.append(f"{e.name:<{width}}  {e.max_rel_error:>12.3e}  {e.max_abs_error:>12.3e}  {e.finite}")
        return "\n".join(lines)


def grad_check(loss_fn: Callable[[], torch.Tensor], params: NamedParams, step: float = 1e-5) -> GradCheckReport:
    """
    Compare autograd gradients of ``loss_fn()`` with central finite differences, one
    scalar coordinate at a time. The relative error of a parameter is
    ‖g_fd − g_ad‖_∞ / max(‖g_fd‖_∞, ‖g_ad‖_∞), taken as 0 when both are exactly zero.
    ``loss_fn`` must be deterministic (reseed any sampling inside it).
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    named = list(params.items()) if isinstance(params, dict) else list(params)

    loss = loss_fn()
    if loss.dim() != 0:
        raise ShapeMismatch(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    analytic = parameter_gradients(loss, named)

    report = GradCheckReport()
    for name, p in named:
        numeric = torch.zeros_like(p)
        flat_p = p.data.view(-1)
        flat_numeric = numeric.view(-1)
        with torch.no_grad():
            for idx in range(flat_p.numel()):
                original = flat_p[idx].item()
                flat_p[idx] = original + step
                plus = loss_fn().item()
                flat_p[idx] = original - step
                minus = loss_fn().item()
                flat_p[idx] = original
                flat_numeric[idx] = (plus - minus) / (2.0 * step)

        g_ad = analytic[name].detach()
        finite = bool(torch.isfinite(g_ad).all() and torch.isfinite(numeric).all())
        abs_err = float((numeric - g_ad).abs().max()) if p.numel() else 0.0
        scale = max(float(numeric.abs().max()), float(g_ad.abs().max())) if p.numel() else 0.0
        rel_err = 0.0 if scale == 0.0 else abs_err / scale
        report.entries.append(GradCheckEntry(name, rel_err, abs_err, finite))
        logger.debug(f"grad_check {name}: rel={rel_err:.3e} abs={abs_err:.3e}")
    return report
