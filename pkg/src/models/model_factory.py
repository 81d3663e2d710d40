import logging
from typing import Optional

import torch

from models.conv_dkm import ConvDKM, ModelConfig, layer_specs
from models.kernels import KernelKind
from models.skr import RegConfig
from util.errors import ConfigError
from util.linalg import Precision

logger = logging.getLogger(__name__)


class ModelFactory:
    @staticmethod
    def kernel_kind(config: dict) -> KernelKind:
        kernel_str = str(config.get("model.kernel", "normalised_gaussian")).upper()

        if kernel_str == "NORMALISED_GAUSSIAN":
            return KernelKind("normalised_gaussian")
        elif kernel_str == "SQ_EXP":
            return KernelKind("sq_exp", float(config.get("model.lengthscale", 1.0)))
        elif kernel_str == "ARCCOS1":
            return KernelKind("arccos1")
        else:
            raise ConfigError(f"Unknown kernel type: {kernel_str}")

    @staticmethod
    def model_config(config: dict, input_channels: int, num_classes: int) -> ModelConfig:
        kinds = [str(k).lower() for k in config["model.layers"]]
        for kind in kinds:
            if kind not in ("fc", "conv"):
                raise ConfigError(f"Unknown layer type: {kind}")
        try:
            specs = layer_specs(kinds, config["model.inducing"], config["model.kernel_sizes"],
                                config["model.strides"])
            skips = tuple((int(start), int(end)) for start, end in config["model.skips"])
            return ModelConfig(
                kernel=ModelFactory.kernel_kind(config),
                input_channels=input_channels,
                input_inducing=int(config["model.input_inducing"]),
                num_classes=num_classes,
                layers=specs,
                skips=skips,
                kernel_jitter=float(config["model.kernel_jitter"]),
                batch_kernel_norm=bool(config["model.batch_kernel_norm"]),
                location_pairs=bool(config["model.location_pairs"]),
            )
        except (TypeError, ValueError) as err:
            raise ConfigError(f"Invalid model topology: {err}") from err

    @staticmethod
    def create_model(config: dict, input_channels: int, num_classes: int,
                     generator: Optional[torch.Generator] = None, device: str = "cpu") -> ConvDKM:
        """Build an uninitialised ConvDKM in the configured precision."""
        model_config = ModelFactory.model_config(config, input_channels, num_classes)
        try:
            reg = RegConfig.from_config(config)
        except ValueError as err:
            raise ConfigError(str(err)) from err
        dtype = Precision(config["train.precision"]).dtype
        model = ConvDKM(model_config, reg, generator=generator, dtype=dtype).to(device)
        logger.info(f"Created ConvDKM with {model.depth} layers, kernel {model_config.kernel.tag}, "
                    f"{sum(p.numel() for p in model.parameters())} parameters")
        return model

    @staticmethod
    def create_initialised(config: dict, train_set, device: str = "cpu") -> ConvDKM:
        """create_model plus inducing-input selection and the NNGP start, all seeded by train.seed."""
        generator = torch.Generator().manual_seed(int(config["train.seed"]))
        model = ModelFactory.create_model(config, train_set.channels, train_set.num_classes, generator, device)
        x_train, _ = train_set.tensors(model.dtype, device)
        model.initialise(x_train, generator)
        return model
