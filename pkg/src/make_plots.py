"""
Figures from gramnet CSV outputs.

    python make_plots.py --cond-dir logs/cond_study/run_0 [--metrics RUN/metrics.csv]
                         [--ablation ABL/ablation_curves.csv] [--out figures/]
"""
import argparse
import csv
import glob
import math
import os
from collections import defaultdict
from typing import Dict, List, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from cond_study import SUMMARY_NAME
from util.metrics_io import CondStudyRow, MetricRow, read_cond_study, read_metrics

PANEL_TITLES = {
    "gamma": "SKR strength $\\gamma$",
    "nu_taylor": "$\\nu$, Taylor KL",
    "nu_exact": "$\\nu$, exact KL",
}


def load_cond_cells(cond_dir: str) -> Dict[str, List[CondStudyRow]]:
    cells = {}
    for path in sorted(glob.glob(os.path.join(cond_dir, "*.csv"))):
        if os.path.basename(path) == SUMMARY_NAME:
            continue
        rows = read_cond_study(path)
        if rows:
            cells[os.path.splitext(os.path.basename(path))[0]] = rows
    return cells


def _cell_label(row: CondStudyRow) -> str:
    if row.panel == "gamma":
        return "$\\gamma=\\infty$" if math.isinf(row.gamma) else f"$\\gamma={int(row.gamma)}$"
    return f"$\\nu={row.nu:g}$"


def plot_cond_study(cells: Dict[str, List[CondStudyRow]]) -> Tuple[plt.Figure, np.ndarray]:
    fig, axes = plt.subplots(1, 3, figsize=(15, 4.5), sharey=True)
    by_panel = defaultdict(list)
    for rows in cells.values():
        by_panel[rows[0].panel].append(rows)

    for ax, panel in zip(axes, PANEL_TITLES):
        # γ descending with ∞ first, ν ascending
        curves = sorted(by_panel.get(panel, []),
                        key=lambda r: -r[0].gamma if panel == "gamma" else r[0].nu)
        for rows in curves:
            ok = [r for r in rows if r.status == "ok" and np.isfinite(r.cond_g_ii)]
            line, = ax.plot([r.epoch for r in ok], [r.cond_g_ii for r in ok], label=_cell_label(rows[0]))
            if rows[-1].status == "failed" and ok:
                ax.plot(ok[-1].epoch, ok[-1].cond_g_ii, "x", color=line.get_color())
        ax.set_yscale("log")
        ax.set_title(PANEL_TITLES[panel])
        ax.set_xlabel("Epoch")
        ax.grid(True, linestyle=":", alpha=0.6)
        if curves:
            ax.legend(fontsize="small")
    axes[0].set_ylabel("Condition number of $G_{ii}$")
    fig.tight_layout()
    return fig, axes


def plot_training_curves(rows: List[MetricRow]) -> Tuple[plt.Figure, np.ndarray]:
    ok = [r for r in rows if r.status == "ok"]
    epochs = [r.epoch for r in ok]
    fig, axes = plt.subplots(1, 3, figsize=(15, 4))

    axes[0].plot(epochs, [r.objective for r in ok])
    axes[0].set_ylabel("Objective")

    axes[1].plot(epochs, [r.train_acc for r in ok], label="train")
    axes[1].plot(epochs, [r.eval_acc for r in ok], label="eval")
    axes[1].set_ylabel("Accuracy")
    axes[1].legend()

    num_layers = max((len(r.cond_g_ii) for r in ok), default=0)
    for layer in range(num_layers):
        axes[2].plot(epochs, [r.cond_g_ii[layer] if layer < len(r.cond_g_ii) else np.nan for r in ok],
                     label=f"layer {layer + 1}")
    axes[2].set_yscale("log")
    axes[2].set_ylabel("cond($G_{ii}$)")
    if num_layers:
        axes[2].legend(fontsize="small")

    for ax in axes:
        ax.set_xlabel("Epoch")
        ax.grid(True, linestyle=":", alpha=0.6)
    if rows and rows[-1].status == "failed":
        fig.suptitle(f"Run failed at epoch {rows[-1].epoch}")
    fig.tight_layout()
    return fig, axes


def plot_ablation_curves(path: str, metric: str = "eval_acc") -> Tuple[plt.Figure, plt.Axes]:
    curves = defaultdict(list)
    with open(path, "r", newline="", encoding="utf-8") as fh:
        for record in csv.DictReader(fh):
            if record["metric"] == metric:
                curves[record["variant"]].append((int(record["epoch"]), float(record["mean"]), float(record["se"])))

    fig, ax = plt.subplots(figsize=(7.5, 5))
    for variant, points in curves.items():
        points.sort()
        epochs, means, ses = (np.array(v) for v in zip(*points))
        ses = np.nan_to_num(ses)
        ax.plot(epochs, means, label=variant)
        ax.fill_between(epochs, means - ses, means + ses, alpha=0.2)
    ax.set_xlabel("Epoch")
    ax.set_ylabel(metric)
    ax.grid(True, linestyle=":", alpha=0.6)
    ax.legend(fontsize="small")
    return fig, ax


def main() -> None:
    parser = argparse.ArgumentParser(description="Plot gramnet CSV outputs")
    parser.add_argument("--cond-dir", type=str, default=None)
    parser.add_argument("--metrics", type=str, default=None)
    parser.add_argument("--ablation", type=str, default=None)
    parser.add_argument("--out", type=str, default="figures")
    args = parser.parse_args()
    os.makedirs(args.out, exist_ok=True)

    if args.cond_dir:
        print("Generating condition-number panels...")
        fig, _ = plot_cond_study(load_cond_cells(args.cond_dir))
        fig.savefig(os.path.join(args.out, "cond_study.png"), dpi=300, bbox_inches="tight")
    if args.metrics:
        print("Generating training curves...")
        fig, _ = plot_training_curves(read_metrics(args.metrics))
        fig.savefig(os.path.join(args.out, "training_curves.png"), dpi=300, bbox_inches="tight")
    if args.ablation:
        print("Generating ablation curves...")
        fig, _ = plot_ablation_curves(args.ablation)
        fig.savefig(os.path.join(args.out, "ablation_eval_acc.png"), dpi=300, bbox_inches="tight")


if __name__ == "__main__":
    main()
