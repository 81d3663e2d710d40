import math
from typing import Tuple


class Welford:
    """
    Welford's online mean/variance aggregator.

    Used to summarise metrics across seeds without keeping every run around.
    Non-finite values are counted separately and never enter the running moments.
    """
    def __init__(self):
        self.count = 0
        self.non_finite = 0
        self.mean = 0.0
        self.M2 = 0.0

    def update_aggr(self, new_val: float) -> None:
        if not math.isfinite(new_val):
            self.non_finite += 1
            return
        self.count += 1
        delta = new_val - self.mean
        self.mean += delta / self.count
        self.M2 += delta * (new_val - self.mean)

    def get_curr_mean_variance(self) -> Tuple[float, float]:
        """Mean and population variance; (nan, nan) before any finite sample."""
        if self.count == 0:
            return math.nan, math.nan
        return self.mean, self.M2 / self.count

    def sample_variance(self) -> float:
        return self.M2 / (self.count - 1) if self.count > 1 else 0.0

    def standard_error(self) -> float:
        if self.count == 0:
            return math.nan
        return math.sqrt(self.sample_variance() / self.count)
