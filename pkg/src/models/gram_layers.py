"""
Layer-level operations of the deep kernel machine: input Grams, kernel convolution with
inducing mix-up, conditional Gram propagation and final spatial pooling.
"""
import logging
import math
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from models.kernels import KernelBlocks, SpatialShape
from util.errors import ShapeMismatch
from util.linalg import CholFactor, cholesky, exp_diag_tril, solve_psd

logger = logging.getLogger(__name__)

__all__ = [
    "initial_gram",
    "conv_mix",
    "propagate_gram",
    "spatial_pool",
    "DKMLayer",
]


def initial_gram(x_t: torch.Tensor, x_i: torch.Tensor, location_pairs: bool = False) -> KernelBlocks:
    """
    Input Gram blocks (1/ν₀) X Xᵀ for images x_t [P_t, ν₀, H, W] and non-spatial
    inducing inputs x_i [P_i, ν₀]. ``location_pairs`` also forms the within-image tt block.
    """
    if x_t.dim() != 4 or x_i.dim() != 2 or x_t.shape[1] != x_i.shape[1]:
        raise ShapeMismatch(
            f"Expected inputs [P_t, C, H, W] and inducing inputs [P_i, C], got "
            f"{tuple(x_t.shape)} and {tuple(x_i.shape)}"
        )
    nu0 = x_t.shape[1]
    ii = x_i @ x_i.T / nu0
    ti = torch.einsum("nchw,jc->njhw", x_t, x_i) / nu0
    tt_diag = (x_t * x_t).sum(1) / nu0
    tt_pairs = None
    if location_pairs:
        flat = x_t.reshape(x_t.shape[0], nu0, -1)
        tt_pairs = flat.transpose(1, 2) @ flat / nu0
    return KernelBlocks(ii, ti, tt_diag, tt_pairs)


def _same_padding(kernel_size: Tuple[int, int]) -> Tuple[int, int]:
    kh, kw = kernel_size
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatch(f"Same padding needs odd kernel sizes, got {kernel_size}")
    return kh // 2, kw // 2


def _pair_patch_average(pairs: torch.Tensor, shape: SpatialShape, kernel_size: Tuple[int, int],
                        stride: int) -> torch.Tensor:
    """
    K(r, s) = (1/D) Σ_d Φ(r + d, s + d) over patch offsets d, zero outside the image,
    evaluated at the strided output locations.
    """
    kh, kw = kernel_size
    ph, pw = _same_padding(kernel_size)
    out = shape.after_conv(stride)
    grid = pairs.reshape(shape.P_t, shape.H, shape.W, shape.H, shape.W)
    grid = F.pad(grid, (pw, pw, ph, ph, pw, pw, ph, ph))
    rows = slice(0, stride * (out.H - 1) + 1, stride)
    cols = slice(0, stride * (out.W - 1) + 1, stride)
    total = 0.0
    for dh in range(kh):
        for dw in range(kw):
            shifted = grid[:, dh:, dw:, dh:, dw:]
            total = total + shifted[:, rows, cols, rows, cols]
    return (total / (kh * kw)).reshape(shape.P_t, out.S, out.S)


def conv_mix(phi: KernelBlocks, mixup: Optional[torch.Tensor], stride: int = 1) -> KernelBlocks:
    """
    Kernel convolution with inducing mix-up. ``mixup`` has shape [P_out, P_in, kh, kw], the
    slice at patch offset d being C_d; D = kh * kw.
        K_ii = (1/D) Σ_d C_d Φ_ii C_dᵀ
        K_ti = cross-correlation of Φ_ti with C over patch offsets, / D
        K_tt = patch average of Φ_tt, along the diagonal and over location pairs
    Zero padding keeps the output size at ceil(size / stride). ``mixup=None`` is the identity.
    """
    if mixup is None:
        if stride != 1:
            raise ShapeMismatch("An identity mix-up cannot be strided")
        return phi
    if mixup.dim() != 4 or mixup.shape[1] != phi.num_inducing:
        raise ShapeMismatch(
            f"Mix-up must be [P_out, {phi.num_inducing}, kh, kw], got {tuple(mixup.shape)}"
        )
    p_out, p_in, kh, kw = mixup.shape
    padding = _same_padding((kh, kw))
    d = kh * kw

    flat_c = mixup.reshape(p_out, p_in, d)
    ii = torch.einsum("oad,ab,pbd->op", flat_c, phi.ii, flat_c) / d
    ti = F.conv2d(phi.ti, mixup, stride=stride, padding=padding) / d
    tt_diag = F.avg_pool2d(
        phi.tt_diag.unsqueeze(1), (kh, kw), stride=stride, padding=padding, count_include_pad=True
    ).squeeze(1)
    tt_pairs = None
    if phi.tt_pairs is not None:
        tt_pairs = _pair_patch_average(phi.tt_pairs, phi.shape, (kh, kw), stride)
    return KernelBlocks(0.5 * (ii + ii.T), ti, tt_diag, tt_pairs)


def _conditional_terms(k: KernelBlocks, factor: CholFactor, g_tilde_ii: torch.Tensor):
    """
    Row-wise pieces of the conditional Gram, one row per (image, location):
        a       = K_ti K_ii⁻¹
        g_ti    = a g̃
        resid   = K_tt − diag(K_ti K_ii⁻¹ K_it), clamped at 0
    """
    k_rows = k.ti_rows()
    a = solve_psd(factor, k_rows.T).T
    g_ti = a @ g_tilde_ii
    resid = (k.tt_diag.reshape(-1) - (k_rows * a).sum(1)).clamp_min(0.0)
    return a, g_ti, resid


def _rows_to_ti(rows: torch.Tensor, shape: SpatialShape) -> torch.Tensor:
    return rows.reshape(shape.P_t, shape.H, shape.W, -1).permute(0, 3, 1, 2)


def _conditional_pairs(k: KernelBlocks, a: torch.Tensor, g_ti: torch.Tensor, resid: torch.Tensor) -> torch.Tensor:
    """
    Within-image conditional Gram
        G_tt(r, s) = a_r g̃ a_sᵀ + K_tt(r, s) − a_r K_ti(s)ᵀ
    with the diagonal taken from the clamped per-location form.
    """
    shape = k.shape
    per_image = (shape.P_t, shape.S, -1)
    a_img = a.reshape(per_image)
    pairs = (g_ti.reshape(per_image) @ a_img.transpose(1, 2)
             + k.tt_pairs
             - a_img @ k.ti_rows().reshape(per_image).transpose(1, 2))
    pairs = 0.5 * (pairs + pairs.transpose(1, 2))
    diag = (g_ti * a).sum(1) + resid
    return pairs - torch.diag_embed(torch.diagonal(pairs, dim1=1, dim2=2)) + torch.diag_embed(diag.reshape(shape.P_t, shape.S))


def propagate_gram(
    k: KernelBlocks,
    g_tilde_ii: torch.Tensor,
    factor: Optional[CholFactor] = None,
) -> KernelBlocks:
    """
    Condition train/test Grams on the inducing Gram g̃:
        G_ti = K_ti K_ii⁻¹ g̃
        G_tt = diag(K_ti K_ii⁻¹ g̃ K_ii⁻¹ K_it) + K_tt − diag(K_ti K_ii⁻¹ K_it)
    Per-location diagonals of the tt block are always formed; the within-image location
    pairs only when ``k`` carries them.
    """
    if g_tilde_ii.shape != k.ii.shape:
        raise ShapeMismatch(f"g̃ shape {tuple(g_tilde_ii.shape)} does not match K_ii {tuple(k.ii.shape)}")
    factor = factor if factor is not None else cholesky(k.ii)
    shape = k.shape
    a, g_ti, resid = _conditional_terms(k, factor, g_tilde_ii)
    tt_diag = (g_ti * a).sum(1) + resid
    tt_pairs = None if k.tt_pairs is None else _conditional_pairs(k, a, g_ti, resid)
    return KernelBlocks(g_tilde_ii, _rows_to_ti(g_ti, shape), tt_diag.reshape(shape.P_t, shape.H, shape.W), tt_pairs)


def spatial_pool(
    k: KernelBlocks,
    g_tilde_ii: torch.Tensor,
    factor: Optional[CholFactor] = None,
) -> KernelBlocks:
    """
    Condition and average over image locations in one step, giving flat (S = 1) blocks.
    The ti block is linear in K_ti, so it is pooled before conditioning:
        G_ti = ā g̃,  ā = (1/S) Σ_r K_ti(r) K_ii⁻¹
    The tt double sum (1/S²) Σ_{r,s} G_tt(r, s) splits into the inducing part ā g̃ āᵀ and
    the conditional residual (1/S²) Σ_{r,s} [K_tt(r, s) − K_ti(r) K_ii⁻¹ K_it(s)].
    With location pairs the residual double sum is exact; without them, residuals at
    different locations are taken as uncorrelated and only the diagonal terms are kept.
    """
    if g_tilde_ii.shape != k.ii.shape:
        raise ShapeMismatch(f"g̃ shape {tuple(g_tilde_ii.shape)} does not match K_ii {tuple(k.ii.shape)}")
    factor = factor if factor is not None else cholesky(k.ii)
    shape = k.shape
    a, _, resid = _conditional_terms(k, factor, g_tilde_ii)
    a_bar = a.reshape(shape.P_t, shape.S, -1).mean(1)
    g_ti = a_bar @ g_tilde_ii
    if k.tt_pairs is None:
        pooled_resid = resid.reshape(shape.P_t, shape.S).sum(1) / shape.S ** 2
    else:
        k_bar = k.ti_rows().reshape(shape.P_t, shape.S, -1).mean(1)
        pooled_resid = (k.tt_pairs.mean(dim=(1, 2)) - (a_bar * k_bar).sum(1)).clamp_min(0.0)
    tt = (g_ti * a_bar).sum(1) + pooled_resid
    pairs = None if k.tt_pairs is None else tt[:, None, None]
    return KernelBlocks(g_tilde_ii, g_ti[:, :, None, None], tt[:, None, None], pairs)


class DKMLayer(nn.Module):
    """
    One DKM layer: the learnable inducing Gram G_ii = L Lᵀ, an optional mix-up map C and,
    on layers that close a skip connection, a skip logit.

    L = A M: A is a fixed lower-triangular anchor set by ``set_gram`` and M the learned
    factor ``gram_factor`` (strict lower triangle plus exp-mapped diagonal), which is the
    identity at the anchor.

    kind "fc" with equal widths uses the identity mix-up; every other layer carries
    C of shape [P_out, P_in, k, k].
    """
    KINDS = ("fc", "conv")

    def __init__(
        self,
        in_inducing: int,
        out_inducing: int,
        kind: str = "fc",
        kernel_size: int = 1,
        stride: int = 1,
        skip: bool = False,
        generator: Optional[torch.Generator] = None,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        if kind not in self.KINDS:
            raise ValueError(f"Unknown layer kind: {kind}")
        if kind == "fc" and (kernel_size != 1 or stride != 1):
            raise ValueError("fc layers have kernel size 1 and stride 1")
        self.kind = kind
        self.in_inducing = in_inducing
        self.out_inducing = out_inducing
        self.kernel_size = kernel_size
        self.stride = stride

        self.gram_factor = nn.Parameter(torch.zeros(out_inducing, out_inducing, dtype=dtype))
        self.register_buffer("gram_anchor", torch.eye(out_inducing, dtype=dtype))
        if skip:
            self.skip_logit = nn.Parameter(torch.zeros((), dtype=dtype))
        else:
            self.register_parameter("skip_logit", None)
        if kind == "fc" and in_inducing == out_inducing:
            self.register_parameter("mixup", None)
        else:
            d = kernel_size * kernel_size
            std = 1.0 / math.sqrt(d * in_inducing)
            c = torch.randn(out_inducing, in_inducing, kernel_size, kernel_size,
                            generator=generator, dtype=dtype) * std
            self.mixup = nn.Parameter(c)

    def cholesky_factor(self) -> CholFactor:
        return CholFactor(self.gram_anchor @ exp_diag_tril(self.gram_factor))

    @torch.no_grad()
    def set_gram(self, g_ii: torch.Tensor) -> None:
        self.gram_anchor.copy_(cholesky(g_ii).lower)
        self.gram_factor.zero_()

    def alpha(self) -> torch.Tensor:
        if self.skip_logit is None:
            raise ValueError("This layer does not close a skip connection")
        return torch.sigmoid(self.skip_logit)

    def mix(self, phi: KernelBlocks) -> KernelBlocks:
        return conv_mix(phi, self.mixup, self.stride)

    def extra_repr(self) -> str:
        return (f"kind={self.kind}, in_inducing={self.in_inducing}, out_inducing={self.out_inducing}, "
                f"kernel_size={self.kernel_size}, stride={self.stride}, skip={self.skip_logit is not None}")
