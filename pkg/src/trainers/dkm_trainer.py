import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.optim.lr_scheduler import LambdaLR

from models.conv_dkm import ConvDKM, LayerRecord
from models.skr import Mode, make_generator
from trainers.abstract_trainer import EpochCallback, Trainer
from trainers.objective import ObjectiveConfig, assemble_objective, kl_exact_core, kl_taylor_core
from util.checkpoint import save_checkpoint
from util.datasets import Dataset
from util.errors import NonFiniteGradient, NumericalFailure
from util.linalg import Precision, factor_condition_number
from util.metrics_io import MetricRow, write_metrics

EVAL_SEED_OFFSET = 7919


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    decay_epochs: Tuple[int, ...] = ()
    decay_factor: float = 0.1
    beta1: float = 0.8
    beta2: float = 0.9
    eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 256
    seed: int = 0
    precision: str = "double"
    mc_samples_eval: int = 64
    checkpoint_every: int = 0
    eval_every: int = 1
    log_every: int = 10
    device: str = "cpu"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"Adam betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")

    @property
    def dtype(self) -> torch.dtype:
        return Precision(self.precision).dtype

    @classmethod
    def from_config(cls, config: dict, device: str = "cpu") -> "TrainConfig":
        return cls(
            lr=float(config["train.lr"]),
            decay_epochs=tuple(int(e) for e in config["train.decay_epochs"]),
            decay_factor=float(config["train.decay_factor"]),
            beta1=float(config["train.beta1"]),
            beta2=float(config["train.beta2"]),
            eps=float(config["train.eps"]),
            epochs=int(config["train.epochs"]),
            batch_size=int(config["train.batch_size"]),
            seed=int(config["train.seed"]),
            precision=str(config["train.precision"]),
            mc_samples_eval=int(config["train.mc_samples_eval"]),
            checkpoint_every=int(config["train.checkpoint_every"]),
            eval_every=int(config["train.eval_every"]),
            log_every=int(config["train.log_every"]),
            device=device,
        )


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """lr₀ · decay_factor^(number of decay epochs ≤ epoch)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr * cfg.decay_factor ** sum(1 for e in cfg.decay_epochs if e <= epoch)


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> Tuple[torch.optim.Adam, LambdaLR]:
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    scheduler = LambdaLR(optimizer, lr_lambda=lambda epoch: lr_schedule(epoch, cfg) / cfg.lr)
    return optimizer, scheduler


def adam_step(optimizer: torch.optim.Optimizer, named_params: Iterable[Tuple[str, torch.Tensor]]) -> None:
    """
    One bias-corrected Adam update on the gradients stored in ``.grad``. Any non-finite
    gradient aborts before a parameter moves.
    """
    for name, param in named_params:
        if param.grad is not None and not bool(torch.isfinite(param.grad).all()):
            raise NonFiniteGradient(name)
    optimizer.step()


@dataclass
class EvalResult:
    mean_ll: float
    accuracy: float
    probs: np.ndarray


@torch.no_grad()
def evaluate(model: ConvDKM, dataset: Dataset, mc_samples: int, seed: int,
             batch_size: int, device: str = "cpu") -> EvalResult:
    """Eval-mode forward (no SKR sampling) with a freshly seeded Monte-Carlo generator."""
    rng = make_generator(seed + EVAL_SEED_OFFSET, device)
    x_all, y_all = dataset.tensors(model.dtype, device)
    probs, log_lik = [], []
    for start in range(0, len(dataset), batch_size):
        x, y = x_all[start:start + batch_size], y_all[start:start + batch_size]
        prediction = model(x, Mode.EVAL, rng, n_mc=mc_samples).prediction
        log_lik.append(prediction.log_probs.gather(1, y[:, None]).squeeze(1))
        probs.append(prediction.probs)
    if not probs:
        return EvalResult(math.nan, math.nan, np.zeros((0, model.config.num_classes)))
    probs_t = torch.cat(probs)
    accuracy = (probs_t.argmax(1) == y_all).double().mean().item()
    return EvalResult(torch.cat(log_lik).mean().item(), accuracy, probs_t.cpu().numpy())


@dataclass
class TrainResult:
    model: ConvDKM
    rows: List[MetricRow] = field(default_factory=list)
    status: str = "ok"
    error: Optional[NumericalFailure] = None


class DKMTrainer(Trainer):
    def __init__(
        self,
        model: ConvDKM,
        train_set: Dataset,
        train_cfg: TrainConfig,
        obj_cfg: ObjectiveConfig,
        eval_set: Optional[Dataset] = None,
        run_dir: Optional[str] = None,
        config: Optional[dict] = None,
        logger: Optional[logging.Logger] = None,
        metrics_path: Optional[str] = None,
        callbacks: Sequence[EpochCallback] = (),
    ):
        super().__init__(metrics_path, callbacks)
        if len(train_set) == 0:
            raise ValueError("Training set is empty")
        self.model = model
        self.train_set = train_set
        self.eval_set = eval_set
        self.train_cfg = train_cfg
        self.obj_cfg = obj_cfg
        self.run_dir = run_dir
        self.config = config
        self.logger = logger or logging.getLogger(__name__)

        self.device = train_cfg.device
        self.shuffle_gen = make_generator(train_cfg.seed, "cpu")
        self.sample_gen = make_generator(train_cfg.seed + 1, self.device)
        self.optimizer, self.scheduler = make_optimizer(model, train_cfg)
        self.named_params = list(model.named_parameters())

        self.steps = 0
        self.last_eval: Optional[EvalResult] = None
        self._last_records: List[LayerRecord] = []
        self._last_sample_cond: List[float] = []

    def _minibatches(self, n: int) -> List[torch.Tensor]:
        perm = torch.randperm(n, generator=self.shuffle_gen)
        return list(torch.split(perm, self.train_cfg.batch_size))

    def _train_epoch(self, x_all: torch.Tensor, y_all: torch.Tensor) -> Dict[str, float]:
        self.model.train()
        n = x_all.shape[0]
        totals = {"objective": 0.0, "train_ll": 0.0, "correct": 0.0}
        for index in self._minibatches(n):
            index = index.to(x_all.device)
            x, y = x_all[index], y_all[index]
            result = self.model(x, Mode.TRAIN, self.sample_gen, n_mc=self.obj_cfg.mc_samples_train)
            terms = assemble_objective(result, y, self.obj_cfg, n, self.model.head)
            if not bool(torch.isfinite(terms.loss)):
                raise NumericalFailure(f"Non-finite objective at step {self.steps + 1}")

            self.optimizer.zero_grad()
            terms.loss.backward()
            adam_step(self.optimizer, self.named_params)
            self.steps += 1

            batch = x.shape[0]
            totals["objective"] += terms.objective.item() * batch
            totals["train_ll"] += terms.expected_ll.item() * batch
            totals["correct"] += (result.probs.argmax(1) == y).sum().item()
            self._last_records = [LayerRecord(r.g_ii.detach(), r.g_factor, r.k_ii.detach(), r.g_tilde_ii.detach())
                                  for r in result.layers]
        self._last_sample_cond = result.sample_condition_numbers()
        return {"objective": totals["objective"] / n, "train_ll": totals["train_ll"] / n,
                "train_acc": totals["correct"] / n}

    @torch.no_grad()
    def layer_condition_numbers(self) -> List[float]:
        return [factor_condition_number(layer.cholesky_factor()) for layer in self.model.layers]

    @torch.no_grad()
    def kl_diagnostics(self) -> List[Tuple[float, float]]:
        """(exact, taylor) core values per layer at the last training step."""
        values = []
        for rec in self._last_records:
            pair = []
            for core in (kl_exact_core, kl_taylor_core):
                try:
                    pair.append(core(rec.g_ii, rec.k_ii).item())
                except NumericalFailure:
                    pair.append(math.nan)
            values.append(tuple(pair))
        return values

    def _save(self, name: str, epoch: int) -> None:
        if self.run_dir is None or self.config is None:
            return
        stats = None
        if self.train_set.norm_mean is not None:
            stats = (self.train_set.norm_mean, self.train_set.norm_std)
        save_checkpoint(os.path.join(self.run_dir, name), self.model, self.config, epoch, stats)

    def train(self) -> TrainResult:
        cfg = self.train_cfg
        result = TrainResult(self.model)
        if self.metrics_path is not None:
            write_metrics([], self.metrics_path)
        x_all, y_all = self.train_set.tensors(self.model.dtype, self.device)
        start = time.perf_counter()

        for epoch in range(cfg.epochs):
            lr = self.optimizer.param_groups[0]["lr"]
            try:
                stats = self._train_epoch(x_all, y_all)
                cond = self.layer_condition_numbers()
                last_epoch = epoch == cfg.epochs - 1
                if self.eval_set is not None and (last_epoch or (cfg.eval_every > 0 and (epoch + 1) % cfg.eval_every == 0)):
                    self.last_eval = evaluate(self.model, self.eval_set, cfg.mc_samples_eval, cfg.seed,
                                              cfg.batch_size, self.device)
            except NumericalFailure as err:
                row = MetricRow.failure(epoch, self.steps, lr, time.perf_counter() - start)
                result.rows.append(row)
                self._record(row)
                result.status, result.error = "failed", err
                self.logger.error(f"Run aborted at epoch {epoch}, step {self.steps}: {err}")
                return result

            eval_ll = self.last_eval.mean_ll if self.last_eval is not None else math.nan
            eval_acc = self.last_eval.accuracy if self.last_eval is not None else math.nan
            row = MetricRow(epoch, self.steps, stats["objective"], stats["train_ll"], stats["train_acc"],
                            eval_ll, eval_acc, cond, lr, time.perf_counter() - start,
                            cond_g_tilde=list(self._last_sample_cond))
            result.rows.append(row)
            self._record(row)
            self.scheduler.step()

            if cfg.log_every > 0 and (epoch % cfg.log_every == 0 or epoch == cfg.epochs - 1):
                cond_str = ", ".join(f"{c:.3e}" for c in cond)
                tilde_str = ", ".join(f"{c:.3e}" for c in self._last_sample_cond)
                kl_str = ", ".join(f"{e:.4g}/{t:.4g}" for e, t in self.kl_diagnostics())
                self.logger.info(
                    f"Epoch {epoch} | step {self.steps} | objective {row.objective:.5f} | "
                    f"train acc {row.train_acc:.4f} | eval acc {row.eval_acc:.4f} | eval LL {row.eval_ll:.4f} | "
                    f"cond(G_ii) [{cond_str}] | cond(g̃_ii) [{tilde_str}] | KL exact/taylor [{kl_str}] | lr {lr:.2e}"
                )
            if cfg.checkpoint_every > 0 and (epoch + 1) % cfg.checkpoint_every == 0:
                self._save(f"checkpoint_epoch{epoch + 1}.pt", epoch + 1)

        if cfg.epochs > 0:
            self._save("final.pt", cfg.epochs)
        return result


def train_loop(model: ConvDKM, dataset: Dataset, train_cfg: TrainConfig, obj_cfg: ObjectiveConfig,
               callbacks: Sequence[EpochCallback] = (), **kwargs) -> TrainResult:
    return DKMTrainer(model, dataset, train_cfg, obj_cfg, callbacks=callbacks, **kwargs).train()
