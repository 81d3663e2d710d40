from abc import ABC, abstractmethod
from typing import Any, Callable, Optional, Sequence

from util.metrics_io import MetricRow, append_metric

EpochCallback = Callable[[MetricRow, "Trainer"], None]


class Trainer(ABC):
    """
    Base class for epoch-based trainers. Every per-epoch metric row goes through ``_record``,
    which appends it to the metrics CSV (when one is configured) and hands it to each callback.
    """

    def __init__(self, metrics_path: Optional[str] = None, callbacks: Sequence[EpochCallback] = ()):
        self.metrics_path = metrics_path
        self.callbacks = list(callbacks)

    def add_callback(self, callback: EpochCallback) -> None:
        self.callbacks.append(callback)

    def _record(self, row: MetricRow) -> None:
        if self.metrics_path is not None:
            append_metric(row, self.metrics_path)
        for callback in self.callbacks:
            callback(row, self)

    @abstractmethod
    def train(self) -> Any:
        """
        Run the optimisation and return its result.
        """
        pass
