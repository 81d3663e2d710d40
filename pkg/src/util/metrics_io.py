"""
Metric CSV files. Floats are written with ``repr`` (shortest round-trip decimal), so reading
a file back reproduces every value bit for bit; non-finite values appear as inf/-inf/nan.
Per-layer condition numbers, of G_ii and of the regularised g̃_ii, each share one column,
separated by '|'.
"""
import csv
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, List

from util.errors import FormatError

METRIC_HEADER = [
    "epoch", "step", "objective", "train_ll", "train_acc", "eval_ll", "eval_acc",
    "cond_g_ii", "lr", "wall_seconds", "status", "cond_g_tilde",
]
STATUSES = ("ok", "failed")
LAYER_SEP = "|"


def _layer_values(field_text: str) -> List[float]:
    return [float(c) for c in field_text.split(LAYER_SEP)] if field_text else []


@dataclass
class MetricRow:
    epoch: int
    step: int
    objective: float = math.nan
    train_ll: float = math.nan
    train_acc: float = math.nan
    eval_ll: float = math.nan
    eval_acc: float = math.nan
    cond_g_ii: List[float] = field(default_factory=list)
    lr: float = math.nan
    wall_seconds: float = math.nan
    status: str = "ok"
    cond_g_tilde: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"status must be one of {STATUSES}, got {self.status!r}")

    def to_record(self) -> List[str]:
        return [
            str(self.epoch), str(self.step),
            repr(float(self.objective)), repr(float(self.train_ll)), repr(float(self.train_acc)),
            repr(float(self.eval_ll)), repr(float(self.eval_acc)),
            LAYER_SEP.join(repr(float(c)) for c in self.cond_g_ii),
            repr(float(self.lr)), repr(float(self.wall_seconds)), self.status,
            LAYER_SEP.join(repr(float(c)) for c in self.cond_g_tilde),
        ]

    @classmethod
    def from_record(cls, record: List[str]) -> "MetricRow":
        epoch, step, obj, tll, tacc, ell, eacc, cond, lr, wall, status, cond_tilde = record
        return cls(
            int(epoch), int(step), float(obj), float(tll), float(tacc), float(ell), float(eacc),
            _layer_values(cond), float(lr), float(wall), status, _layer_values(cond_tilde),
        )

    @classmethod
    def failure(cls, epoch: int, step: int, lr: float, wall_seconds: float) -> "MetricRow":
        return cls(epoch, step, lr=lr, wall_seconds=wall_seconds, status="failed")


def write_metrics(rows: Iterable[MetricRow], path: str) -> None:
    """Write a complete metrics file: the header followed by ``rows``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_HEADER)
        for row in rows:
            writer.writerow(row.to_record())


def append_metric(row: MetricRow, path: str) -> None:
    """Append one row, writing the header first if the file is new, and flush."""
    new_file = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(METRIC_HEADER)
        writer.writerow(row.to_record())
        fh.flush()


def read_metrics(path: str) -> List[MetricRow]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRIC_HEADER:
            raise FormatError(f"Unexpected metrics header {header}", offset=0)
        rows = []
        for record in reader:
            if len(record) != len(METRIC_HEADER):
                raise FormatError(f"Metrics row with {len(record)} fields", offset=reader.line_num)
            rows.append(MetricRow.from_record(record))
        return rows


COND_STUDY_HEADER = [
    "panel", "gamma", "nu", "kl_mode", "epoch", "cond_g_ii", "objective", "train_acc", "status", "cond_g_tilde",
]


@dataclass
class CondStudyRow:
    panel: str
    gamma: float
    nu: float
    kl_mode: str
    epoch: int
    cond_g_ii: float
    objective: float
    train_acc: float
    status: str = "ok"
    cond_g_tilde: float = math.nan

    def to_record(self) -> List[str]:
        return [self.panel, repr(float(self.gamma)), repr(float(self.nu)), self.kl_mode, str(self.epoch),
                repr(float(self.cond_g_ii)), repr(float(self.objective)), repr(float(self.train_acc)), self.status,
                repr(float(self.cond_g_tilde))]

    @classmethod
    def from_record(cls, record: List[str]) -> "CondStudyRow":
        panel, gamma, nu, mode, epoch, cond, obj, acc, status, cond_tilde = record
        return cls(panel, float(gamma), float(nu), mode, int(epoch), float(cond), float(obj), float(acc), status,
                   float(cond_tilde))


def write_cond_study(rows: Iterable[CondStudyRow], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(COND_STUDY_HEADER)
        for row in rows:
            writer.writerow(row.to_record())


def read_cond_study(path: str) -> List[CondStudyRow]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != COND_STUDY_HEADER:
            raise FormatError(f"Unexpected cond-study header {header}", offset=0)
        return [CondStudyRow.from_record(record) for record in reader]
