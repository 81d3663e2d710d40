"""
Kernel nonlinearities acting on Gram-matrix blocks.

Blocks are carried as a KernelBlocks triple:
    ii:      [P_i, P_i]          inducing-inducing block
    ti:      [P_t, P_i, H, W]    test/train-inducing block, one P_i vector per image location
    tt_diag: [P_t, H, W]         diagonal of the test/train block, per image location
plus, when the model tracks location pairs, the within-image block
    tt_pairs: [P_t, S, S]        covariance between every pair of locations of one image,
                                 locations in (row, column) order, S = H * W
Vector data uses H = W = 1.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import torch

from util.autodiff import safe_arccos
from util.errors import NonPositiveDiagonal, ShapeMismatch

logger = logging.getLogger(__name__)

__all__ = [
    "SpatialShape",
    "KernelBlocks",
    "KernelKind",
    "apply_kernel",
    "batch_kernel_normalise",
    "skip_combine",
]


@dataclass(frozen=True)
class SpatialShape:
    P_t: int
    H: int
    W: int

    def __post_init__(self):
        if self.H < 1 or self.W < 1:
            raise ShapeMismatch(f"Spatial shape must be at least 1x1, got {self.H}x{self.W}")

    @property
    def S(self) -> int:
        return self.H * self.W

    def after_conv(self, stride: int) -> "SpatialShape":
        # same padding: output size is ceil(size / stride)
        return SpatialShape(self.P_t, -(-self.H // stride), -(-self.W // stride))


@dataclass
class KernelBlocks:
    ii: torch.Tensor
    ti: torch.Tensor
    tt_diag: torch.Tensor
    tt_pairs: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.ii.dim() != 2 or self.ii.shape[0] != self.ii.shape[1]:
            raise ShapeMismatch(f"ii block must be square, got {tuple(self.ii.shape)}")
        if self.ti.dim() != 4 or self.ti.shape[1] != self.ii.shape[0]:
            raise ShapeMismatch(
                f"ti block must be [P_t, {self.ii.shape[0]}, H, W], got {tuple(self.ti.shape)}"
            )
        expected = (self.ti.shape[0],) + tuple(self.ti.shape[2:])
        if tuple(self.tt_diag.shape) != expected:
            raise ShapeMismatch(f"tt_diag must have shape {expected}, got {tuple(self.tt_diag.shape)}")
        if self.tt_pairs is not None:
            s = self.ti.shape[2] * self.ti.shape[3]
            if tuple(self.tt_pairs.shape) != (self.ti.shape[0], s, s):
                raise ShapeMismatch(
                    f"tt_pairs must have shape {(self.ti.shape[0], s, s)}, got {tuple(self.tt_pairs.shape)}"
                )

    @property
    def shape(self) -> SpatialShape:
        return SpatialShape(self.ti.shape[0], self.ti.shape[2], self.ti.shape[3])

    @property
    def num_inducing(self) -> int:
        return self.ii.shape[0]

    def scale(self, factor) -> "KernelBlocks":
        pairs = None if self.tt_pairs is None else self.tt_pairs * factor
        return KernelBlocks(self.ii * factor, self.ti * factor, self.tt_diag * factor, pairs)

    def ti_rows(self) -> torch.Tensor:
        """ti as a [P_t * H * W, P_i] matrix, rows ordered (image, row, column)."""
        return self.ti.permute(0, 2, 3, 1).reshape(-1, self.num_inducing)


@dataclass(frozen=True)
class KernelKind:
    tag: str
    lengthscale: float = 1.0

    TAGS = ("sq_exp", "arccos1", "normalised_gaussian")

    def __post_init__(self):
        if self.tag not in self.TAGS:
            raise ValueError(f"Unknown kernel kind: {self.tag}")
        if self.tag == "sq_exp" and not self.lengthscale > 0:
            raise ValueError(f"lengthscale must be positive, got {self.lengthscale}")

    @property
    def needs_positive_diagonal(self) -> bool:
        return self.tag != "sq_exp"


def _check_diagonals(ii_diag: torch.Tensor, tt_diag: torch.Tensor) -> None:
    if bool((ii_diag <= 0).any()):
        raise NonPositiveDiagonal("ii block has a non-positive diagonal entry")
    if bool((tt_diag <= 0).any()):
        raise NonPositiveDiagonal("tt block has a non-positive diagonal entry")


# Each kernel maps an off-diagonal Gram entry G_ab with diagonals G_aa, G_bb to Φ_ab, and a
# diagonal entry G_aa to Φ_aa.

def _sq_exp(kind: KernelKind, g_ab: torch.Tensor, d_a: torch.Tensor, d_b: torch.Tensor) -> torch.Tensor:
    return torch.exp(-(d_a + d_b - 2.0 * g_ab) / (2.0 * kind.lengthscale ** 2))


def _arccos1(kind: KernelKind, g_ab: torch.Tensor, d_a: torch.Tensor, d_b: torch.Tensor) -> torch.Tensor:
    norm = torch.sqrt(d_a * d_b)
    theta = safe_arccos(g_ab / norm)
    return norm / math.pi * (torch.sin(theta) + (math.pi - theta) * torch.cos(theta))


def _normalised_gaussian(kind: KernelKind, g_ab: torch.Tensor, d_a: torch.Tensor, d_b: torch.Tensor) -> torch.Tensor:
    return torch.exp(g_ab / torch.sqrt(d_a * d_b) - 1.0)


PairFn = Callable[[KernelKind, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]

_KERNELS: Dict[str, PairFn] = {
    "sq_exp": _sq_exp,
    "arccos1": _arccos1,
    "normalised_gaussian": _normalised_gaussian,
}


def _kernel_diagonal(kind: KernelKind, d: torch.Tensor) -> torch.Tensor:
    # θ = 0 on the diagonal: arccos keeps G_aa, the other two give 1
    return d if kind.tag == "arccos1" else torch.ones_like(d)


def _with_diagonal(m: torch.Tensor, diag: torch.Tensor) -> torch.Tensor:
    return m - torch.diag_embed(torch.diagonal(m, dim1=-2, dim2=-1)) + torch.diag_embed(diag)


def apply_kernel(kind: KernelKind, g: KernelBlocks) -> KernelBlocks:
    """Map Gram blocks to kernel blocks using only dot-product information."""
    ii_diag = torch.diagonal(g.ii)
    if kind.needs_positive_diagonal:
        _check_diagonals(ii_diag, g.tt_diag)
    pair = _KERNELS[kind.tag]

    ii = _with_diagonal(pair(kind, g.ii, ii_diag[:, None], ii_diag[None, :]), _kernel_diagonal(kind, ii_diag))
    ti = pair(kind, g.ti, g.tt_diag.unsqueeze(1), ii_diag.view(1, -1, 1, 1))
    tt_diag = _kernel_diagonal(kind, g.tt_diag)
    tt_pairs = None
    if g.tt_pairs is not None:
        d = g.tt_diag.reshape(g.tt_pairs.shape[:2])
        tt_pairs = _with_diagonal(pair(kind, g.tt_pairs, d[:, :, None], d[:, None, :]),
                                  _kernel_diagonal(kind, d))
    return KernelBlocks(ii, ti, tt_diag, tt_pairs)


def batch_kernel_normalise(g: KernelBlocks) -> KernelBlocks:
    """Divide every block by the mean inducing diagonal."""
    s = torch.diagonal(g.ii).mean()
    if not bool(s > 0):
        raise NonPositiveDiagonal(f"Mean inducing diagonal must be positive, got {float(s)}")
    return g.scale(1.0 / s)


def skip_combine(before: KernelBlocks, after: KernelBlocks, alpha) -> KernelBlocks:
    """Blockwise α·after + (1−α)·before."""
    if (before.tt_pairs is None) != (after.tt_pairs is None):
        raise ShapeMismatch("skip_combine needs location pairs on both sides or on neither")
    names = ("ii", "ti", "tt_diag") + (("tt_pairs",) if before.tt_pairs is not None else ())
    for name in names:
        if getattr(before, name).shape != getattr(after, name).shape:
            raise ShapeMismatch(
                f"skip_combine {name} shapes differ: "
                f"{tuple(getattr(before, name).shape)} vs {tuple(getattr(after, name).shape)}"
            )
    mixed = {name: alpha * getattr(after, name) + (1.0 - alpha) * getattr(before, name) for name in names}
    return KernelBlocks(**mixed)
