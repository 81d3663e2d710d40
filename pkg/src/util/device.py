import logging
import os

import torch

THREADS_ENV = "GRAMNET_THREADS"

logger = logging.getLogger(__name__)


def fetch_device(requested: str = "auto") -> str:
    """
    'cuda' if requested (or 'auto') and a GPU is available, otherwise 'cpu'.
    """
    if requested == "cpu":
        return "cpu"
    if requested == "cuda" and not torch.cuda.is_available():
        logger.warning("CUDA requested but not available; falling back to CPU")
    return 'cuda' if torch.cuda.is_available() else 'cpu'


def configure_threads() -> None:
    """Cap torch's intra-op parallelism at $GRAMNET_THREADS when it is set."""
    value = os.environ.get(THREADS_ENV)
    if not value:
        return
    try:
        threads = int(value)
    except ValueError:
        logger.warning(f"Ignoring {THREADS_ENV}={value!r}: not an integer")
        return
    if threads >= 1:
        torch.set_num_threads(threads)
