"""
Condition-number study: train the one-layer toy DKM under a sweep of regularisation settings
and record cond(G_ii) and cond(g̃_ii) at every epoch, one CSV per sweep cell.

Panels
    gamma      SKR degrees of freedom over study.gammas ("inf" disables SKR), ν = study.gamma_panel_nu
    nu_taylor  ν over study.nus with the Taylor KL, SKR off
    nu_exact   ν over study.nus with the exact KL, SKR off
"""
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Tuple

from models.model_factory import ModelFactory
from trainers.dkm_trainer import DKMTrainer, TrainConfig
from trainers.objective import ObjectiveConfig
from util.config import resolve_config
from util.datasets import datasets_from_config
from util.errors import ConfigError, NumericalFailure
from util.metrics_io import CondStudyRow, MetricRow, write_cond_study

logger = logging.getLogger(__name__)

PANELS = ("gamma", "nu_taylor", "nu_exact")
SUMMARY_NAME = "cond_study_summary.csv"


@dataclass(frozen=True)
class StudyCell:
    panel: str
    gamma: float
    nu: float
    kl_mode: str

    @property
    def name(self) -> str:
        gamma = "inf" if math.isinf(self.gamma) else f"{int(self.gamma)}"
        return f"{self.panel}_gamma-{gamma}_nu-{self.nu:g}"


@dataclass(frozen=True)
class StudyConfig:
    gammas: Tuple[float, ...]
    nus: Tuple[float, ...]
    panels: Tuple[str, ...]
    gamma_panel_nu: float
    epochs: int
    workers: int

    @classmethod
    def from_config(cls, config: dict) -> "StudyConfig":
        try:
            gammas = tuple(float(g) for g in config["study.gammas"])
            nus = tuple(float(n) for n in config["study.nus"])
        except (TypeError, ValueError) as err:
            raise ConfigError(f"study.gammas and study.nus must be numbers: {err}") from err
        panels = tuple(str(p) for p in config["study.panels"])
        for panel in panels:
            if panel not in PANELS:
                raise ConfigError(f"Unknown study panel {panel!r}; expected one of {PANELS}")
        for gamma in gammas:
            if not (math.isinf(gamma) or (gamma >= 1 and gamma.is_integer())):
                raise ConfigError(f"study.gammas entries must be positive integers or inf, got {gamma}")
        if any(nu < 0 for nu in nus):
            raise ConfigError("study.nus entries must be non-negative")
        return cls(gammas, nus, panels, float(config["study.gamma_panel_nu"]),
                   int(config["study.epochs"]), max(1, int(config["study.workers"])))

    def cells(self) -> List[StudyCell]:
        cells = []
        for panel in self.panels:
            if panel == "gamma":
                cells.extend(StudyCell(panel, g, self.gamma_panel_nu, "taylor") for g in self.gammas)
            else:
                mode = "taylor" if panel == "nu_taylor" else "exact"
                cells.extend(StudyCell(panel, math.inf, nu, mode) for nu in self.nus)
        return cells


def cell_config(config: dict, cell: StudyCell, epochs: int) -> Dict:
    """The run config of one sweep cell: double precision, fixed learning rate, no evaluation."""
    overrides = {
        "train.precision": "double",
        "train.decay_epochs": [],
        "train.epochs": epochs,
        "train.eval_every": 0,
        "train.checkpoint_every": 0,
        "reg.enabled": not math.isinf(cell.gamma),
        "objective.nu": cell.nu,
        "objective.kl_mode": cell.kl_mode,
        "data.eval_size": 0,
    }
    if not math.isinf(cell.gamma):
        overrides["reg.gamma"] = int(cell.gamma)
    return resolve_config({**config, **overrides})


def _study_row(cell: StudyCell, row: MetricRow) -> CondStudyRow:
    cond = max(row.cond_g_ii) if row.cond_g_ii else math.nan
    cond_tilde = max(row.cond_g_tilde) if row.cond_g_tilde else math.nan
    return CondStudyRow(cell.panel, cell.gamma, cell.nu, cell.kl_mode, row.epoch, cond,
                        row.objective, row.train_acc, row.status, cond_tilde)


def run_cell(config: dict, cell: StudyCell, epochs: int, out_dir: str) -> List[CondStudyRow]:
    """Train one cell and write <out_dir>/<cell name>.csv. Numerical failures end the cell early."""
    run_config = cell_config(config, cell, epochs)
    rows: List[CondStudyRow] = []
    try:
        train_set, _ = datasets_from_config(run_config)
        model = ModelFactory.create_initialised(run_config, train_set)
        trainer = DKMTrainer(model, train_set, TrainConfig.from_config(run_config),
                             ObjectiveConfig.from_config(run_config),
                             callbacks=[lambda row, _: rows.append(_study_row(cell, row))])
        trainer.train()
    except NumericalFailure as err:
        logger.warning(f"Cell {cell.name} failed during initialisation: {err}")
        rows.append(CondStudyRow(cell.panel, cell.gamma, cell.nu, cell.kl_mode, 0, math.nan,
                                 math.nan, math.nan, "failed"))
    write_cond_study(rows, os.path.join(out_dir, f"{cell.name}.csv"))
    return rows


def _run_cell_job(job: Tuple[dict, StudyCell, int, str]) -> List[CondStudyRow]:
    return run_cell(*job)


def run_cond_study(config: dict, out_dir: str, run_logger: logging.Logger = logger) -> List[List[CondStudyRow]]:
    study = StudyConfig.from_config(config)
    cells = study.cells()
    os.makedirs(out_dir, exist_ok=True)
    run_logger.info(f"Condition study: {len(cells)} cells, {study.epochs} epochs, {study.workers} worker(s)")

    jobs = [(config, cell, study.epochs, out_dir) for cell in cells]
    if study.workers > 1:
        with ProcessPoolExecutor(max_workers=study.workers) as executor:
            # executor.map returns results in cell order
            results = list(executor.map(_run_cell_job, jobs))
    else:
        results = [_run_cell_job(job) for job in jobs]

    summary = []
    for cell, rows in zip(cells, results):
        final = rows[-1] if rows else None
        if final is None:
            continue
        summary.append(final)
        run_logger.info(f"{cell.name:<32} final cond(G_ii) {final.cond_g_ii:.4e}  "
                        f"cond(g̃_ii) {final.cond_g_tilde:.4e}  status {final.status}")
    write_cond_study(summary, os.path.join(out_dir, SUMMARY_NAME))
    return results
