import os
import json
import logging
from typing import Optional

import colorlog


def _next_run_dir(base_dir: str, run_name: str) -> str:
    model_dir = os.path.join(base_dir, run_name)
    os.makedirs(model_dir, exist_ok=True)
    existing_runs = [d for d in os.listdir(model_dir)
                     if d.startswith("run_") and os.path.isdir(os.path.join(model_dir, d))]
    run_number = max([int(d.split('_')[1]) for d in existing_runs], default=-1) + 1
    return os.path.join(model_dir, f"run_{run_number}")


def setup_run_directory_and_logging(config: dict, out_dir: Optional[str] = None,
                                    base_log_dir: str = "logs", verb: str = "train"):
    """
    Create the run directory and a logger writing to <run_dir>/<verb>.log and the console.
    With ``out_dir`` the directory is used as given; otherwise a fresh
    <base_log_dir>/<run.name>/run_N is created.
    """
    try:
        run_name = config["run.name"]
    except KeyError:
        raise KeyError("The configuration must include a 'run.name' key.")

    run_dir = out_dir if out_dir else _next_run_dir(base_log_dir, run_name)
    os.makedirs(run_dir, exist_ok=True)

    logger = logging.getLogger(f"gramnet.{run_name}.{verb}.{os.path.abspath(run_dir)}")
    logger.setLevel(logging.INFO)
    logger.propagate = False

    for handler in logger.handlers[:]:
        logger.removeHandler(handler)
        handler.close()

    file_handler = logging.FileHandler(os.path.join(run_dir, f"{verb}.log"))
    file_handler.setFormatter(logging.Formatter('%(asctime)s - %(levelname)s - %(message)s'))
    logger.addHandler(file_handler)

    stream_handler = colorlog.StreamHandler()
    stream_handler.setFormatter(colorlog.ColoredFormatter('%(log_color)s%(levelname)s%(reset)s: %(message)s'))
    logger.addHandler(stream_handler)

    logger.info(f"Starting {verb} run")
    logger.info(f"Run Directory: {run_dir}")
    config_str = json.dumps(config, indent=4, default=str, sort_keys=True)
    logger.info(f"Configuration:\n{config_str}")

    return run_dir, logger


def close_logger(logger: logging.Logger) -> None:
    for handler in logger.handlers[:]:
        logger.removeHandler(handler)
        handler.close()


def console_logger(name: str = "gramnet") -> logging.Logger:
    """A console-only logger for messages emitted before a run directory exists."""
    logger = logging.getLogger(name)
    if not logger.handlers:
        stream_handler = colorlog.StreamHandler()
        stream_handler.setFormatter(colorlog.ColoredFormatter('%(log_color)s%(levelname)s%(reset)s: %(message)s'))
        logger.addHandler(stream_handler)
        logger.setLevel(logging.INFO)
        logger.propagate = False
    return logger
