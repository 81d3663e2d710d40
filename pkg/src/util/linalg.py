"""
Symmetric dense linear algebra on torch tensors.

Every Gram and kernel block in the model is a plain ``torch.Tensor``; its dtype is the
precision mode (``single`` -> float32, ``double`` -> float64). These helpers are the only
place factorisations happen, so failures surface as the errors in ``util.errors``.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum

import torch

from util.errors import (
    ConvergenceFailure,
    DecompositionFailure,
    DimensionMismatch,
    NonFiniteInput,
    PrecisionMismatch,
    ShapeMismatch,
)

logger = logging.getLogger(__name__)

__all__ = [
    "Precision",
    "CholFactor",
    "check_same_precision",
    "symmetrize",
    "cholesky",
    "solve_psd",
    "sym_eigenvalues",
    "condition_number",
    "factor_condition_number",
    "exp_diag_tril",
]


class Precision(str, Enum):
    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self) -> torch.dtype:
        return torch.float32 if self is Precision.SINGLE else torch.float64

    @staticmethod
    def of(tensor: torch.Tensor) -> "Precision":
        if tensor.dtype == torch.float64:
            return Precision.DOUBLE
        if tensor.dtype == torch.float32:
            return Precision.SINGLE
        raise PrecisionMismatch(f"Unsupported dtype {tensor.dtype}; expected float32 or float64")


@dataclass(frozen=True)
class CholFactor:
    """Lower-triangular factor L with L Lᵀ equal to the factorised matrix."""
    lower: torch.Tensor

    @property
    def dim(self) -> int:
        return self.lower.shape[-1]

    @property
    def precision(self) -> Precision:
        return Precision.of(self.lower)

    def logdet(self) -> torch.Tensor:
        return 2.0 * torch.log(torch.diagonal(self.lower, dim1=-2, dim2=-1)).sum(-1)

    def reconstruct(self) -> torch.Tensor:
        return self.lower @ self.lower.transpose(-1, -2)


def check_same_precision(*tensors: torch.Tensor) -> torch.dtype:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) != 1:
        raise PrecisionMismatch(f"Mixed precision operands: {sorted(str(d) for d in dtypes)}")
    return dtypes.pop()


def _check_square(m: torch.Tensor) -> None:
    if m.dim() != 2 or m.shape[0] != m.shape[1]:
        raise ShapeMismatch(f"Expected a square matrix, got shape {tuple(m.shape)}")


def symmetrize(m: torch.Tensor) -> torch.Tensor:
    return 0.5 * (m + m.transpose(-1, -2))


def cholesky(m: torch.Tensor, jitter: float = 0.0) -> CholFactor:
    """
    Factorise ``m + jitter * I``. Raises DecompositionFailure carrying the 0-based index
    of the first non-positive pivot. ``m`` itself is never modified.
    """
    _check_square(m)
    Precision.of(m)
    if not math.isfinite(jitter) or jitter < 0:
        raise ValueError(f"jitter must be finite and non-negative, got {jitter}")
    if jitter > 0:
        m = m + jitter * torch.eye(m.shape[0], dtype=m.dtype, device=m.device)
    lower, info = torch.linalg.cholesky_ex(m)
    info = int(info)
    if info != 0:
        raise DecompositionFailure(
            f"Cholesky failed: leading minor of order {info} is not positive definite",
            pivot=info - 1,
        )
    return CholFactor(lower)


def solve_psd(f: CholFactor, b: torch.Tensor) -> torch.Tensor:
    """Solve (L Lᵀ) X = b with a forward then a backward triangular substitution."""
    squeeze = b.dim() == 1
    if squeeze:
        b = b.unsqueeze(-1)
    if b.shape[0] != f.dim:
        raise DimensionMismatch(f"Factor has dim {f.dim} but right-hand side has {b.shape[0]} rows")
    check_same_precision(f.lower, b)
    y = torch.linalg.solve_triangular(f.lower, b, upper=False)
    x = torch.linalg.solve_triangular(f.lower.transpose(-1, -2), y, upper=True)
    return x.squeeze(-1) if squeeze else x


def sym_eigenvalues(m: torch.Tensor) -> torch.Tensor:
    """Full real spectrum of a symmetric matrix, ascending."""
    _check_square(m)
    if not torch.isfinite(m).all():
        raise NonFiniteInput("sym_eigenvalues received non-finite entries")
    try:
        return torch.linalg.eigvalsh(symmetrize(m))
    except torch.linalg.LinAlgError as err:
        raise ConvergenceFailure(f"Symmetric eigensolver did not converge: {err}") from err


def condition_number(m: torch.Tensor) -> float:
    """λ_max / λ_min, or +inf when the smallest eigenvalue is not positive."""
    with torch.no_grad():
        eigs = sym_eigenvalues(m.detach())
    lam_min, lam_max = float(eigs[0]), float(eigs[-1])
    if lam_min <= 0.0:
        return math.inf
    return lam_max / lam_min


def factor_condition_number(f: CholFactor) -> float:
    """cond(L Lᵀ) = (σ_max(L) / σ_min(L))², from the singular values of the factor in double precision."""
    with torch.no_grad():
        lower = f.lower.detach()
        if not torch.isfinite(lower).all():
            raise NonFiniteInput("factor_condition_number received non-finite entries")
        sv = torch.linalg.svdvals(lower.to(torch.float64))
    s_min, s_max = float(sv[-1]), float(sv[0])
    if s_min <= 0.0:
        return math.inf
    return (s_max / s_min) ** 2


def exp_diag_tril(raw: torch.Tensor) -> torch.Tensor:
    """Strict lower triangle of ``raw`` plus exp of its diagonal."""
    return torch.tril(raw, diagonal=-1) + torch.diag_embed(torch.exp(torch.diagonal(raw, dim1=-2, dim2=-1)))
