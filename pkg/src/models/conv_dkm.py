"""
Convolutional deep kernel machine.

A forward pass starts from the input Gram blocks and, per layer, runs
batch kernel normalisation -> kernel nonlinearity -> kernel convolution/mix-up ->
stochastic kernel regularisation -> conditional Gram propagation, with optional skip
combinations. The last layer conditions and spatially pools in one step; the flat blocks
then go through the kernel nonlinearity into the output GP.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from sklearn.cluster import KMeans
from torch import nn

from models.gram_layers import DKMLayer, initial_gram, propagate_gram, spatial_pool
from models.kernels import (
    KernelBlocks,
    KernelKind,
    apply_kernel,
    batch_kernel_normalise,
    skip_combine,
)
from models.output_head import OutputHead, Prediction
from models.skr import Mode, RegConfig, skr_sample
from util.errors import NumericalFailure, ShapeMismatch
from util.linalg import CholFactor, cholesky, condition_number

logger = logging.getLogger(__name__)

KMEANS_ITERATIONS = 50


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    inducing: int
    kernel_size: int = 1
    stride: int = 1


@dataclass(frozen=True)
class ModelConfig:
    kernel: KernelKind
    input_channels: int
    input_inducing: int
    num_classes: int
    layers: Tuple[LayerSpec, ...] = ()
    skips: Tuple[Tuple[int, int], ...] = ()
    kernel_jitter: float = 1e-6
    batch_kernel_norm: bool = True
    location_pairs: bool = False

    def __post_init__(self):
        widths = [self.input_inducing] + [spec.inducing for spec in self.layers]
        depth = len(self.layers)
        for start, end in self.skips:
            if not 1 <= start <= end < depth:
                raise ValueError(
                    f"Skip ({start}, {end}) must satisfy 1 <= start <= end < {depth} (the last layer pools)"
                )
            if widths[start - 1] != widths[end]:
                raise ValueError(f"Skip ({start}, {end}) joins widths {widths[start - 1]} and {widths[end]}")
            if any(self.layers[i].stride != 1 for i in range(start - 1, end)):
                raise ValueError(f"Skip ({start}, {end}) spans a strided layer")
        if len({end for _, end in self.skips}) != len(self.skips):
            raise ValueError("At most one skip may end at a given layer")


@dataclass
class LayerRecord:
    g_ii: torch.Tensor
    g_factor: CholFactor
    k_ii: torch.Tensor
    g_tilde_ii: torch.Tensor


@dataclass
class ForwardResult:
    prediction: Prediction
    k_flat: KernelBlocks
    layers: List[LayerRecord] = field(default_factory=list)

    @property
    def probs(self) -> torch.Tensor:
        return self.prediction.probs

    def sample_condition_numbers(self) -> List[float]:
        """cond(g̃_ii) of the regularised Grams used for prediction, one per layer."""
        return [condition_number(rec.g_tilde_ii) for rec in self.layers]


class ConvDKM(nn.Module):
    def __init__(self, config: ModelConfig, reg: RegConfig,
                 generator: Optional[torch.Generator] = None, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.config = config
        self.reg = reg
        self.inducing_inputs = nn.Parameter(
            torch.zeros(config.input_inducing, config.input_channels, dtype=dtype)
        )
        self._skip_ends = {end: start for start, end in config.skips}
        layers = []
        width = config.input_inducing
        for idx, spec in enumerate(config.layers, start=1):
            layers.append(DKMLayer(width, spec.inducing, spec.kind, spec.kernel_size, spec.stride,
                                   skip=idx in self._skip_ends, generator=generator, dtype=dtype))
            width = spec.inducing
        self.layers = nn.ModuleList(layers)
        self.head = OutputHead(width, config.num_classes, dtype=dtype)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def dtype(self) -> torch.dtype:
        return self.inducing_inputs.dtype

    def _jittered(self, k: KernelBlocks) -> KernelBlocks:
        if self.config.kernel_jitter <= 0:
            return k
        scale = torch.diagonal(k.ii).mean()
        eye = torch.eye(k.ii.shape[0], dtype=k.ii.dtype, device=k.ii.device)
        return KernelBlocks(k.ii + self.config.kernel_jitter * scale * eye, k.ti, k.tt_diag, k.tt_pairs)

    def _layer_kernel(self, layer: DKMLayer, g: KernelBlocks) -> KernelBlocks:
        if self.config.batch_kernel_norm:
            g = batch_kernel_normalise(g)
        return self._jittered(layer.mix(apply_kernel(self.config.kernel, g)))

    def forward(self, x_t: torch.Tensor, mode: Mode = Mode.EVAL, rng: Optional[torch.Generator] = None,
                n_mc: int = 1, _nngp_init: bool = False) -> ForwardResult:
        if x_t.dim() != 4 or x_t.shape[1] != self.config.input_channels:
            raise ShapeMismatch(
                f"Expected inputs [P_t, {self.config.input_channels}, H, W], got {tuple(x_t.shape)}"
            )
        records: List[LayerRecord] = []

        if self.depth == 0:
            g_flat = initial_gram(x_t.mean(dim=(2, 3), keepdim=True), self.inducing_inputs)
        else:
            g = initial_gram(x_t, self.inducing_inputs, self.config.location_pairs)
            skip_inputs = {}
            g_flat = None
            for idx, layer in enumerate(self.layers, start=1):
                try:
                    skip_inputs[idx] = g
                    k = self._layer_kernel(layer, g)
                    if _nngp_init:
                        layer.set_gram(k.ii)
                    g_factor = layer.cholesky_factor()
                    g_ii = g_factor.reconstruct()
                    g_tilde = skr_sample(g_ii, self.reg, rng, mode, factor=g_factor)
                    records.append(LayerRecord(g_ii, g_factor, k.ii, g_tilde))

                    k_factor = cholesky(k.ii)
                    if idx == self.depth:
                        g_flat = spatial_pool(k, g_tilde, k_factor)
                    else:
                        g = propagate_gram(k, g_tilde, k_factor)
                        if idx in self._skip_ends:
                            g = skip_combine(skip_inputs[self._skip_ends[idx]], g, layer.alpha())
                except NumericalFailure as err:
                    raise err.with_layer(idx)

        try:
            k_flat = self._jittered(apply_kernel(self.config.kernel, g_flat))
            if _nngp_init:
                with torch.no_grad():
                    self.head.mu.zero_()
                    self.head.set_sigma(k_flat.ii)
            prediction = self.head.predict(k_flat, n_mc, rng)
        except NumericalFailure as err:
            raise err.with_layer(self.depth + 1)
        return ForwardResult(prediction, k_flat, records)

    def _patch_means(self, x_train: torch.Tensor) -> Optional[torch.Tensor]:
        """Mean pixel vector of every k x k training patch, when the first layer convolves over an image."""
        first = self.config.layers[0] if self.config.layers else None
        if first is None or first.kind != "conv" or first.kernel_size == 1 or x_train.shape[2] * x_train.shape[3] == 1:
            return None
        k = first.kernel_size
        means = F.avg_pool2d(x_train, k, stride=1, padding=k // 2, count_include_pad=False)
        return means.permute(0, 2, 3, 1).reshape(-1, x_train.shape[1])

    @torch.no_grad()
    def initialise(self, x_train: torch.Tensor, generator: Optional[torch.Generator] = None,
                   init_batch: int = 64) -> None:
        """
        Inducing inputs from the training set, then every G_ii set to the prior kernel block
        it receives (the NNGP start) and the head set to μ = 0, Σ = K_ii of the output GP.

        Vector inputs take a random subset of training points. Image inputs under a
        convolutional first layer take k-means centroids of the training patch means.
        """
        patches = self._patch_means(x_train)
        candidates = patches if patches is not None else x_train.permute(0, 2, 3, 1).reshape(-1, x_train.shape[1])
        count = self.config.input_inducing
        if candidates.shape[0] >= count:
            index = torch.randperm(candidates.shape[0], generator=generator)[:count]
        else:
            index = torch.randint(candidates.shape[0], (count,), generator=generator)
        chosen = candidates[index.to(candidates.device)]

        if patches is not None and candidates.shape[0] >= count:
            seed = int(torch.randint(2 ** 31 - 1, (1,), generator=generator))
            points = candidates.detach().cpu().double().numpy()
            kmeans = KMeans(n_clusters=count, init=chosen.detach().cpu().double().numpy(), n_init=1,
                            max_iter=KMEANS_ITERATIONS, random_state=seed).fit(points)
            chosen = torch.as_tensor(kmeans.cluster_centers_)
            logger.debug("Inducing inputs from %d patch centroids of %d patches", count, points.shape[0])
        self.inducing_inputs.copy_(chosen.to(self.inducing_inputs.device, self.dtype))

        batch = x_train[: min(init_batch, x_train.shape[0])].to(self.dtype)
        self.forward(batch, Mode.EVAL, generator, n_mc=1, _nngp_init=True)
        logger.debug("Initialised %d layers from the NNGP prior", self.depth)


def layer_specs(kinds: Sequence[str], inducing: Sequence[int], kernel_sizes: Sequence[int],
                strides: Sequence[int]) -> Tuple[LayerSpec, ...]:
    n = len(kinds)
    if not (len(inducing) == len(kernel_sizes) == len(strides) == n):
        raise ValueError(
            f"Layer lists disagree in length: kinds={n}, inducing={len(inducing)}, "
            f"kernel_sizes={len(kernel_sizes)}, strides={len(strides)}"
        )
    return tuple(LayerSpec(str(k), int(p), int(s), int(st))
                 for k, p, s, st in zip(kinds, inducing, kernel_sizes, strides))
