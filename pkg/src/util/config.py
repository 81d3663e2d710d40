"""
Run configuration: flat ``key = value`` text with ``#`` comments and dotted namespaces.

Values are parsed with YAML scalar/list rules, so ``[1, 2]``, ``true``, ``1e-3``, ``inf`` and
quoted strings all work. Every allowed key appears in DEFAULTS; its default fixes the type.
"""
import hashlib
import json
import logging
import math
import os
from typing import Any, Dict, Iterable, List, Optional

import yaml

from util.errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULTS: Dict[str, Any] = {
    "run.name": "gramnet",

    "data.kind": "toy",
    "data.train_size": 512,
    "data.eval_size": 512,
    "data.noise": 0.1,
    "data.train_path": "",
    "data.eval_path": "",
    "data.image_size": 8,
    "data.classes": 4,
    "data.channels": 3,

    "model.kernel": "normalised_gaussian",
    "model.lengthscale": 1.0,
    "model.input_inducing": 100,
    "model.layers": ["fc"],
    "model.inducing": [100],
    "model.kernel_sizes": [1],
    "model.strides": [1],
    "model.skips": [],
    "model.kernel_jitter": 1e-6,
    "model.batch_kernel_norm": True,
    "model.location_pairs": False,

    "reg.enabled": True,
    "reg.gamma": 0,
    "reg.jitter": 0.1,

    "objective.nu": 1e-3,
    "objective.kl_mode": "taylor",
    "objective.mc_samples_train": 8,

    "train.lr": 0.01,
    "train.decay_epochs": [],
    "train.decay_factor": 0.1,
    "train.beta1": 0.8,
    "train.beta2": 0.9,
    "train.eps": 1e-8,
    "train.epochs": 50,
    "train.batch_size": 256,
    "train.seed": 0,
    "train.precision": "double",
    "train.device": "cpu",
    "train.mc_samples_eval": 64,
    "train.checkpoint_every": 0,
    "train.eval_every": 1,
    "train.log_every": 10,

    "study.gammas": ["inf", 400, 100, 25],
    "study.nus": [0.0, 1e-4, 1e-3, 1e-2],
    "study.panels": ["gamma", "nu_taylor", "nu_exact"],
    "study.gamma_panel_nu": 0.0,
    "study.epochs": 2000,
    "study.workers": 1,

    "gradcheck.points": 8,
    "gradcheck.step": 1e-5,
    "gradcheck.threshold": 1e-4,
    "gradcheck.perturb": 0.05,

    "ablation.seeds": [0, 1, 2],
    "ablation.variants": ["full", "no_taylor", "no_skr", "no_taylor_no_skr", "no_skr_keep_jitter", "nu_zero"],
}

# keys accepting either a scalar or a per-layer list
SCALAR_OR_LIST = {"objective.nu"}


def _parse_value(key: str, text: str) -> Any:
    try:
        return yaml.safe_load(text) if text.strip() else ""
    except yaml.YAMLError as err:
        raise ConfigError(f"Cannot parse value for '{key}': {text!r} ({err})") from err


def _to_float(key: str, value: Any) -> float:
    if isinstance(value, bool):
        raise ConfigError(f"'{key}' expects a number, got {value!r}")
    try:
        return float(value)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"'{key}' expects a number, got {value!r}") from err


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if key in SCALAR_OR_LIST:
        if isinstance(value, (list, tuple)):
            return [_to_float(key, v) for v in value]
        return _to_float(key, value)
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "yes", "no", "on", "off"):
            return value.lower() in ("true", "yes", "on")
        raise ConfigError(f"'{key}' expects a boolean, got {value!r}")
    if isinstance(default, int):
        number = _to_float(key, value)
        if not number.is_integer():
            raise ConfigError(f"'{key}' expects an integer, got {value!r}")
        return int(number)
    if isinstance(default, float):
        return _to_float(key, value)
    if isinstance(default, list):
        if value is None or value == "":
            return []
        return list(value) if isinstance(value, (list, tuple)) else [value]
    return "" if value is None else str(value)


def parse_config_text(text: str, source: str = "<string>") -> Dict[str, Any]:
    """Parse ``key = value`` lines into raw (uncoerced) values."""
    raw: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        raw[key] = _parse_value(key, value)
    return raw


def parse_overrides(overrides: Iterable[str]) -> Dict[str, Any]:
    raw: Dict[str, Any] = {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"Override must look like key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        raw[key] = _parse_value(key, value)
    return raw


def resolve_config(raw: Dict[str, Any]) -> Dict[str, Any]:
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
    config = dict(DEFAULTS)
    for key, value in raw.items():
        config[key] = _coerce(key, value)
    validate_config(config)
    return config


def validate_config(config: Dict[str, Any]) -> None:
    if config["data.kind"] not in ("toy", "raw_u8"):
        raise ConfigError(f"data.kind must be 'toy' or 'raw_u8', got {config['data.kind']!r}")
    if config["train.precision"] not in ("single", "double"):
        raise ConfigError(f"train.precision must be 'single' or 'double', got {config['train.precision']!r}")
    if config["objective.kl_mode"] not in ("exact", "taylor"):
        raise ConfigError(f"objective.kl_mode must be 'exact' or 'taylor', got {config['objective.kl_mode']!r}")
    if config["train.lr"] <= 0:
        raise ConfigError("train.lr must be positive")
    for beta in ("train.beta1", "train.beta2"):
        if not 0 <= config[beta] < 1:
            raise ConfigError(f"{beta} must lie in [0, 1)")
    for key in ("train.batch_size", "objective.mc_samples_train", "train.mc_samples_eval", "model.input_inducing"):
        if config[key] < 1:
            raise ConfigError(f"{key} must be >= 1")
    if config["train.epochs"] < 0:
        raise ConfigError("train.epochs must be >= 0")
    if config["reg.gamma"] < 0:
        raise ConfigError("reg.gamma must be >= 1, or 0 for P_i // 4")
    if not math.isfinite(config["reg.jitter"]) or config["reg.jitter"] < 0:
        raise ConfigError("reg.jitter must be finite and non-negative")


def check_paths(config: Dict[str, Any]) -> None:
    if config["data.kind"] != "raw_u8":
        return
    if not config["data.train_path"]:
        raise ConfigError("data.kind = raw_u8 requires data.train_path")
    for key in ("data.train_path", "data.eval_path"):
        path = config[key]
        if path and not os.path.isfile(path):
            raise ConfigError(f"{key} does not exist: {path}")


def load_config(path: Optional[str] = None, overrides: Optional[List[str]] = None,
                require_paths: bool = True, base: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """``base`` values first, then the file, then ``--set`` overrides, then defaults for the rest."""
    raw: Dict[str, Any] = dict(base or {})
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw.update(parse_config_text(fh.read(), source=path))
        except OSError as err:
            raise ConfigError(f"Cannot read config file {path}: {err}") from err
    raw.update(parse_overrides(overrides or []))
    config = resolve_config(raw)
    if require_paths:
        check_paths(config)
    return config


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return value if value and yaml.safe_load(value) == value else json.dumps(value)
    if isinstance(value, list):
        return "[" + ", ".join(_render(v) for v in value) + "]"
    return str(value)


def dump_config(config: Dict[str, Any]) -> str:
    return "".join(f"{key} = {_render(config[key])}\n" for key in sorted(config))


def config_hash(config: Dict[str, Any]) -> str:
    return hashlib.sha256(dump_config(config).encode("utf-8")).hexdigest()


def write_resolved_config(config: Dict[str, Any], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(config))
