import csv
import math
import threading
from collections import defaultdict
from typing import Dict, List, Tuple

from util.metrics_io import MetricRow
from util.welford import Welford

CURVE_METRICS = ("objective", "train_acc", "eval_acc", "eval_ll")
SUMMARY_HEADER = ["variant", "runs", "failures", "eval_acc_mean", "eval_acc_se", "eval_ll_mean", "eval_ll_se"]
CURVE_HEADER = ["variant", "metric", "epoch", "mean", "se", "count"]


class MetricsTracker:
    """
    Thread-safe record of training runs grouped by variant (e.g. an ablation setting),
    one run per seed. For each variant and epoch a Welford aggregator is kept per metric,
    together with the final eval metrics and the number of failed runs.
    """
    def __init__(self):
        self._lock = threading.RLock()
        # variant -> metric -> epoch -> Welford
        self._curves = defaultdict(lambda: defaultdict(lambda: defaultdict(Welford)))
        self._final_acc = defaultdict(Welford)
        self._final_ll = defaultdict(Welford)
        self._runs = defaultdict(int)
        self._failures = defaultdict(int)

    def add_run(self, variant: str, rows: List[MetricRow]) -> None:
        """Record one complete run. A run whose last row failed counts as a failure."""
        with self._lock:
            self._runs[variant] += 1
            ok_rows = [row for row in rows if row.status == "ok"]
            for row in ok_rows:
                for metric in CURVE_METRICS:
                    self._curves[variant][metric][row.epoch].update_aggr(getattr(row, metric))
            if rows and rows[-1].status == "failed":
                self._failures[variant] += 1
            elif ok_rows:
                self._final_acc[variant].update_aggr(ok_rows[-1].eval_acc)
                self._final_ll[variant].update_aggr(ok_rows[-1].eval_ll)

    def failures(self, variant: str) -> Tuple[int, int]:
        with self._lock:
            return self._failures[variant], self._runs[variant]

    def get_curve(self, variant: str, metric: str) -> Tuple[List[int], List[float], List[float]]:
        """(epochs, means, standard errors) of ``metric`` across the variant's runs."""
        with self._lock:
            per_epoch = self._curves[variant][metric]
            epochs = sorted(per_epoch.keys())
            means = [per_epoch[e].get_curr_mean_variance()[0] for e in epochs]
            ses = [per_epoch[e].standard_error() for e in epochs]
            return epochs, means, ses

    def summary(self) -> List[Dict[str, float]]:
        with self._lock:
            table = []
            for variant in self._runs:
                acc, ll = self._final_acc[variant], self._final_ll[variant]
                table.append({
                    "variant": variant,
                    "runs": self._runs[variant],
                    "failures": self._failures[variant],
                    "eval_acc_mean": acc.get_curr_mean_variance()[0],
                    "eval_acc_se": acc.standard_error(),
                    "eval_ll_mean": ll.get_curr_mean_variance()[0],
                    "eval_ll_se": ll.standard_error(),
                })
            return table

    def write_summary(self, path: str) -> None:
        with self._lock, open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(SUMMARY_HEADER)
            for entry in self.summary():
                writer.writerow([entry[key] if isinstance(entry[key], (str, int)) else repr(float(entry[key]))
                                 for key in SUMMARY_HEADER])

    def write_curves(self, path: str) -> None:
        with self._lock, open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(CURVE_HEADER)
            for variant in self._curves:
                for metric in CURVE_METRICS:
                    epochs, means, ses = self.get_curve(variant, metric)
                    for epoch, mean, se in zip(epochs, means, ses):
                        count = self._curves[variant][metric][epoch].count
                        writer.writerow([variant, metric, epoch, repr(mean), repr(se), count])


def format_summary(summary: List[Dict[str, float]]) -> str:
    lines = [f"{'variant':<20} {'failures':>9} {'eval acc':>18} {'eval LL':>18}"]
    for entry in summary:
        acc = "n/a" if math.isnan(entry["eval_acc_mean"]) else \
            f"{entry['eval_acc_mean']:.4f} ± {entry['eval_acc_se']:.4f}"
        ll = "n/a" if math.isnan(entry["eval_ll_mean"]) else \
            f"{entry['eval_ll_mean']:.4f} ± {entry['eval_ll_se']:.4f}"
        lines.append(f"{entry['variant']:<20} {entry['failures']:>4}/{entry['runs']:<4} {acc:>18} {ll:>18}")
    return "\n".join(lines)
