"""
Stability ablation: train every variant over several seeds and tabulate failures together with
the final eval accuracy and log-likelihood (mean ± standard error over the completed runs).

    python run_ablation.py --config configs/conv_demo.cfg [--set key=value ...] [--out DIR]
"""
import argparse
import os
import sys
from typing import Dict, List, Optional

from models.model_factory import ModelFactory
from trainers.dkm_trainer import DKMTrainer, TrainConfig
from trainers.objective import ObjectiveConfig
from util.config import load_config, resolve_config, write_resolved_config
from util.datasets import datasets_from_config
from util.device import configure_threads, fetch_device
from util.errors import ConfigError, GramNetError, NumericalFailure
from util.logger_utils import close_logger, setup_run_directory_and_logging
from util.metrics_io import MetricRow, write_metrics
from util.metrics_tracker import MetricsTracker, format_summary

VARIANTS: Dict[str, Dict[str, object]] = {
    "full": {},
    "no_taylor": {"objective.kl_mode": "exact"},
    "no_skr": {"reg.enabled": False, "reg.jitter": 0.0},
    "no_taylor_no_skr": {"objective.kl_mode": "exact", "reg.enabled": False, "reg.jitter": 0.0},
    "no_skr_keep_jitter": {"reg.enabled": False},
    "nu_zero": {"objective.nu": 0.0},
}


def variant_config(config: dict, variant: str, seed: int) -> dict:
    if variant not in VARIANTS:
        raise ConfigError(f"Unknown ablation variant {variant!r}; expected one of {sorted(VARIANTS)}")
    return resolve_config({**config, **VARIANTS[variant], "train.seed": seed})


def run_variant_seed(config: dict, run_dir: str, logger) -> List[MetricRow]:
    os.makedirs(run_dir, exist_ok=True)
    metrics_path = os.path.join(run_dir, "metrics.csv")
    write_resolved_config(config, os.path.join(run_dir, "resolved.cfg"))
    device = fetch_device(config["train.device"])
    train_set, eval_set = datasets_from_config(config)
    train_cfg = TrainConfig.from_config(config, device)
    try:
        model = ModelFactory.create_initialised(config, train_set, device)
    except NumericalFailure as err:
        logger.error(f"Initialisation failed: {err}")
        rows = [MetricRow.failure(0, 0, train_cfg.lr, 0.0)]
        write_metrics(rows, metrics_path)
        return rows
    trainer = DKMTrainer(model, train_set, train_cfg, ObjectiveConfig.from_config(config),
                         eval_set=eval_set, logger=logger, metrics_path=metrics_path)
    return trainer.train().rows


def run_ablation(config: dict, out_dir: Optional[str] = None) -> MetricsTracker:
    root_dir, logger = setup_run_directory_and_logging(config, out_dir, verb="ablation")
    tracker = MetricsTracker()
    try:
        write_resolved_config(config, os.path.join(root_dir, "resolved.cfg"))
        seeds = [int(s) for s in config["ablation.seeds"]]
        for variant in config["ablation.variants"]:
            for seed in seeds:
                run_config = variant_config(config, str(variant), seed)
                logger.info(f"Variant {variant}, seed {seed}")
                rows = run_variant_seed(run_config, os.path.join(root_dir, str(variant), f"seed_{seed}"), logger)
                tracker.add_run(str(variant), rows)
                failed, runs = tracker.failures(str(variant))
                status = rows[-1].status if rows else "ok"
                logger.info(f"Variant {variant}, seed {seed}: {status} ({failed}/{runs} failures so far)")

        tracker.write_summary(os.path.join(root_dir, "ablation_summary.csv"))
        tracker.write_curves(os.path.join(root_dir, "ablation_curves.csv"))
        logger.info("Ablation summary\n" + format_summary(tracker.summary()))
        return tracker
    finally:
        close_logger(logger)


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="Stability ablation over seeds")
    parser.add_argument("--config", type=str, default=None)
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--out", type=str, default=None)
    args = parser.parse_args(argv)

    configure_threads()
    try:
        run_ablation(load_config(args.config, args.overrides), args.out)
    except (GramNetError, ValueError, OSError) as err:
        print(f"{type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
