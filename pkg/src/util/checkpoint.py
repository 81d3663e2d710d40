"""
Model checkpoints: a ``torch.save`` archive holding one dict

    format       "gramnet-checkpoint"
    version      1
    config_hash  SHA-256 of the resolved config text
    config       the resolved flat config map
    shapes       {parameter name: list of dims}
    state_dict   every parameter tensor
    epoch        epochs completed
    norm_stats   (mean, std) channel lists of the train split, or None
"""
import logging
from typing import Any, Dict, Optional

import torch
from torch import nn

from util.config import config_hash
from util.errors import FormatError, ShapeMismatch

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "gramnet-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, model: nn.Module, config: Dict[str, Any], epoch: int,
                    norm_stats: Optional[tuple] = None) -> None:
    state = {k: v.detach().cpu() for k, v in model.state_dict().items()}
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash(config),
        "config": dict(config),
        "shapes": {name: list(t.shape) for name, t in state.items()},
        "state_dict": state,
        "epoch": epoch,
        "norm_stats": None if norm_stats is None else [list(map(float, s)) for s in norm_stats],
    }, path)


def read_checkpoint(path: str) -> Dict[str, Any]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as err:
        raise FormatError(f"Cannot read checkpoint {path}: {err}", offset=0) from err
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path} is not a gramnet checkpoint", offset=0)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"Unsupported checkpoint version {payload.get('version')}", offset=0)
    if payload["config_hash"] != config_hash(payload["config"]):
        raise FormatError("Checkpoint config does not match its hash", offset=0)
    return payload


def load_into(model: nn.Module, payload: Dict[str, Any]) -> None:
    """Copy checkpoint parameters into ``model`` after checking every shape header."""
    expected = {name: list(t.shape) for name, t in model.state_dict().items()}
    if expected != payload["shapes"]:
        raise ShapeMismatch(f"Checkpoint shapes {payload['shapes']} do not match the model {expected}")
    for name, tensor in payload["state_dict"].items():
        if list(tensor.shape) != payload["shapes"][name]:
            raise ShapeMismatch(f"Tensor {name} has shape {list(tensor.shape)}, header says {payload['shapes'][name]}")
    model.load_state_dict(payload["state_dict"])
