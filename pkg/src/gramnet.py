"""
gramnet command line.

    python gramnet.py train      --config configs/toy.cfg [--set key=value ...] [--out DIR] [--seed N]
    python gramnet.py eval       --checkpoint RUN/final.pt [--config ...] [--out DIR]
    python gramnet.py cond-study --config configs/cond_study.cfg
    python gramnet.py gradcheck  --config configs/toy.cfg
    python gramnet.py gen-data   --config configs/conv_demo.cfg --out data/

Exit codes: 0 success, 1 configuration/IO error (or a failed gradient check), 2 numerical failure.
"""
import argparse
import csv
import os
import sys
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch

from cond_study import run_cond_study
from models.model_factory import ModelFactory
from models.skr import Mode, make_generator
from trainers.dkm_trainer import DKMTrainer, TrainConfig, evaluate
from trainers.objective import ObjectiveConfig, assemble_objective
from util.autodiff import grad_check
from util.checkpoint import load_into, read_checkpoint
from util.config import load_config, resolve_config, write_resolved_config
from util.datasets import (
    datasets_from_config,
    gen_synthetic_images,
    gen_toy_binary,
    load_image_dataset,
    write_image_dataset,
    write_toy_csv,
)
from util.device import configure_threads, fetch_device
from util.errors import ConfigError, GramNetError, NumericalFailure
from util.logger_utils import close_logger, console_logger, setup_run_directory_and_logging
from util.metrics_io import MetricRow, write_metrics

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NUMERICAL = 2

METRICS_NAME = "metrics.csv"
PREDICTIONS_NAME = "predictions.csv"
RESOLVED_NAME = "resolved.cfg"
GRADCHECK_SEED_OFFSET = 2

console = console_logger()


@dataclass(frozen=True)
class GradCheckConfig:
    points: int = 8
    step: float = 1e-5
    threshold: float = 1e-4
    perturb: float = 0.05

    @classmethod
    def from_config(cls, config: dict) -> "GradCheckConfig":
        cfg = cls(int(config["gradcheck.points"]), float(config["gradcheck.step"]),
                  float(config["gradcheck.threshold"]), float(config["gradcheck.perturb"]))
        if cfg.points < 1 or cfg.step <= 0 or cfg.threshold < 0:
            raise ConfigError(f"Invalid gradcheck settings: {cfg}")
        return cfg


def cmd_train(config: dict, out_dir: Optional[str] = None) -> int:
    run_dir, logger = setup_run_directory_and_logging(config, out_dir, verb="train")
    metrics_path = os.path.join(run_dir, METRICS_NAME)
    try:
        write_resolved_config(config, os.path.join(run_dir, RESOLVED_NAME))
        device = fetch_device(config["train.device"])
        train_set, eval_set = datasets_from_config(config)
        train_cfg = TrainConfig.from_config(config, device)
        try:
            model = ModelFactory.create_initialised(config, train_set, device)
        except NumericalFailure as err:
            write_metrics([MetricRow.failure(0, 0, train_cfg.lr, 0.0)], metrics_path)
            logger.error(f"Initialisation failed: {err}")
            return EXIT_NUMERICAL

        trainer = DKMTrainer(model, train_set, train_cfg, ObjectiveConfig.from_config(config),
                             eval_set=eval_set, run_dir=run_dir, config=config, logger=logger,
                             metrics_path=metrics_path)
        result = trainer.train()
        if result.status == "failed":
            return EXIT_NUMERICAL
        if trainer.last_eval is not None:
            logger.info(f"Final eval accuracy {trainer.last_eval.accuracy:.4f}, "
                        f"mean log-likelihood {trainer.last_eval.mean_ll:.4f}")
        logger.info(f"Training finished; outputs in {run_dir}")
        return EXIT_OK
    finally:
        close_logger(logger)


def _eval_split(config: dict, norm_stats, num_classes: int):
    if config["data.kind"] == "toy":
        if int(config["data.eval_size"]) < 1:
            raise ConfigError("eval needs data.eval_size >= 1")
        return gen_toy_binary(int(config["data.eval_size"]), int(config["train.seed"]) + 1,
                              float(config["data.noise"]), "eval")
    if not config["data.eval_path"]:
        raise ConfigError("eval needs data.eval_path for raw_u8 data")
    stats = None if norm_stats is None else tuple(np.asarray(s, dtype=np.float64) for s in norm_stats)
    return load_image_dataset(config["data.eval_path"], "raw_u8", "eval", stats=stats, num_classes=num_classes)


def cmd_eval(config: dict, checkpoint: str, out_dir: Optional[str] = None) -> int:
    """Evaluate a checkpoint on the eval split of ``config`` and write per-datapoint probabilities."""
    payload = read_checkpoint(checkpoint)
    run_dir, logger = setup_run_directory_and_logging(config, out_dir, verb="eval")
    try:
        write_resolved_config(config, os.path.join(run_dir, RESOLVED_NAME))
        state = payload["state_dict"]
        channels = state["inducing_inputs"].shape[1]
        classes = state["head.mu"].shape[1]
        device = fetch_device(config["train.device"])

        model_config = resolve_config(payload["config"])
        model = ModelFactory.create_model(model_config, channels, classes, device=device)
        load_into(model, payload)
        eval_set = _eval_split(config, payload["norm_stats"], classes)

        train_cfg = TrainConfig.from_config(config, device)
        result = evaluate(model, eval_set, train_cfg.mc_samples_eval, train_cfg.seed, train_cfg.batch_size, device)

        with open(os.path.join(run_dir, PREDICTIONS_NAME), "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "label"] + [f"prob_{k}" for k in range(classes)])
            for idx, (label, probs) in enumerate(zip(eval_set.labels, result.probs)):
                writer.writerow([idx, int(label)] + [repr(float(p)) for p in probs])

        logger.info(f"Checkpoint {checkpoint} (epoch {payload['epoch']}) on {len(eval_set)} eval points: "
                    f"accuracy {result.accuracy:.4f}, mean log-likelihood {result.mean_ll:.4f}")
        return EXIT_OK
    finally:
        close_logger(logger)


def cmd_cond_study(config: dict, out_dir: Optional[str] = None) -> int:
    run_dir, logger = setup_run_directory_and_logging(config, out_dir, verb="cond_study")
    try:
        write_resolved_config(config, os.path.join(run_dir, RESOLVED_NAME))
        results = run_cond_study(config, run_dir, logger)
        failed = sum(1 for rows in results if rows and rows[-1].status == "failed")
        logger.info(f"Condition study finished: {len(results)} cells, {failed} failed")
        return EXIT_OK
    finally:
        close_logger(logger)


def cmd_gradcheck(config: dict, out_dir: Optional[str] = None) -> int:
    """
    Finite-difference check of the full objective's gradient at a seeded, perturbed point,
    in double precision with SKR in eval mode.
    """
    config = resolve_config({**config, "train.precision": "double"})
    check = GradCheckConfig.from_config(config)
    run_dir, logger = setup_run_directory_and_logging(config, out_dir, verb="gradcheck")
    try:
        seed = int(config["train.seed"])
        train_set, _ = datasets_from_config(config)
        train_set = train_set.subset(check.points)
        model = ModelFactory.create_initialised(config, train_set)
        obj_cfg = ObjectiveConfig.from_config(config)

        generator = make_generator(seed)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(check.perturb * torch.randn(p.shape, generator=generator, dtype=p.dtype))

        x, y = train_set.tensors(model.dtype)

        def loss_fn() -> torch.Tensor:
            rng = make_generator(seed + GRADCHECK_SEED_OFFSET)
            result = model(x, Mode.EVAL, rng, n_mc=obj_cfg.mc_samples_train)
            return assemble_objective(result, y, obj_cfg, len(train_set), model.head).loss

        report = grad_check(loss_fn, list(model.named_parameters()), check.step)
        logger.info("Gradient check\n" + report.as_table())
        if report.passed(check.threshold):
            logger.info(f"PASS: max relative error {report.max_rel_error:.3e} < {check.threshold:g}")
            return EXIT_OK
        logger.error(f"FAIL: max relative error {report.max_rel_error:.3e} >= {check.threshold:g}")
        return EXIT_ERROR
    finally:
        close_logger(logger)


def cmd_gen_data(config: dict, out_dir: Optional[str] = None) -> int:
    out_dir = out_dir or "data"
    os.makedirs(out_dir, exist_ok=True)
    seed = int(config["train.seed"])
    if config["data.kind"] == "toy":
        train_set, eval_set = datasets_from_config(config)
        write_toy_csv(train_set, os.path.join(out_dir, "toy_train.csv"))
        if eval_set is not None:
            write_toy_csv(eval_set, os.path.join(out_dir, "toy_eval.csv"))
        console.info(f"Wrote two-moons splits to {out_dir}")
        return EXIT_OK

    shape = (int(config["data.classes"]), int(config["data.image_size"]), int(config["data.channels"]))
    for split, size, split_seed in (("train", config["data.train_size"], seed),
                                    ("eval", config["data.eval_size"], seed + 1)):
        if int(size) < 1:
            continue
        pixels, labels = gen_synthetic_images(int(size), *shape, seed=split_seed)
        path = os.path.join(out_dir, f"bars_{split}.u8")
        write_image_dataset(path, pixels, labels)
        console.info(f"Wrote {len(labels)} {split} images to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gramnet", description="Convolutional deep kernel machines")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, help_text in (("train", "train a model"),
                            ("eval", "evaluate a checkpoint"),
                            ("cond-study", "run the Gram condition-number study"),
                            ("gradcheck", "check autodiff gradients against finite differences"),
                            ("gen-data", "write synthetic datasets")):
        cmd = sub.add_parser(verb, help=help_text)
        cmd.add_argument("--config", type=str, default=None, help="key = value config file")
        cmd.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                         help="override a config value (repeatable)")
        cmd.add_argument("--out", type=str, default=None, help="output directory")
        cmd.add_argument("--seed", type=int, default=None, help="shorthand for --set train.seed=N")
        if verb == "eval":
            cmd.add_argument("--checkpoint", type=str, required=True)
    return parser


def _resolve(args: argparse.Namespace) -> dict:
    overrides: List[str] = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    require_paths = args.verb != "gen-data"
    if args.verb == "eval" and args.config is None:
        # the checkpoint's own config, with --set applied on top
        return load_config(None, overrides, require_paths, base=read_checkpoint(args.checkpoint)["config"])
    return load_config(args.config, overrides, require_paths)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_threads()
    try:
        config = _resolve(args)
        if args.verb == "train":
            return cmd_train(config, args.out)
        if args.verb == "eval":
            return cmd_eval(config, args.checkpoint, args.out)
        if args.verb == "cond-study":
            return cmd_cond_study(config, args.out)
        if args.verb == "gradcheck":
            return cmd_gradcheck(config, args.out)
        return cmd_gen_data(config, args.out)
    except NumericalFailure as err:
        console.error(f"Numerical failure: {err}")
        return EXIT_NUMERICAL
    except (GramNetError, ValueError, OSError) as err:
        console.error(f"{type(err).__name__}: {err}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
