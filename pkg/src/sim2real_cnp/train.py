"""Optimisation: Adam with validation-driven annealing and early stopping,
normalisation shared between pre-training and fine-tuning, evaluation."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator

import numpy as np
import torch

from sim2real_cnp.fields import SEKernelParams, gp_posterior_oracle_sum
from sim2real_cnp.model import ConvCNP, GaussianPrediction, NonFiniteLossError, nll_loss
from sim2real_cnp.tasks import Task
from sim2real_cnp.util import ConfigurationError


@dataclass(frozen=True)
class Normalizer:
    """Affine maps taking raw coordinates to [0, 1] and raw values to zero
    mean / unit std. Computed once on pre-training data and reused verbatim
    for fine-tuning."""

    coord_lo: tuple[float, ...]
    coord_hi: tuple[float, ...]
    value_mean: float
    value_std: float

    def __post_init__(self) -> None:
        if self.value_std <= 0:
            raise ConfigurationError("value_std must be positive")
        if any(hi <= lo for lo, hi in zip(self.coord_lo, self.coord_hi)):
            raise ConfigurationError("coordinate bounds must have hi > lo")

    def norm_x(self, x: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.coord_lo)
        hi = np.asarray(self.coord_hi)
        return (np.asarray(x, dtype=np.float64) - lo) / (hi - lo)

    def denorm_x(self, x: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.coord_lo)
        hi = np.asarray(self.coord_hi)
        return np.asarray(x, dtype=np.float64) * (hi - lo) + lo

    def norm_y(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.value_mean) / self.value_std

    def denorm_y(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) * self.value_std + self.value_mean

    def norm_task(self, task: Task) -> Task:
        d = len(self.coord_lo)
        xc = np.asarray(task.x_context, dtype=np.float64).reshape(-1, d)
        return Task(
            time_id=task.time_id,
            x_context=self.norm_x(xc),
            y_context=self.norm_y(task.y_context),
            x_target=self.norm_x(task.x_target),
            y_target=self.norm_y(task.y_target),
            kind=task.kind,
            aux=task.aux,
            context_ids=task.context_ids,
            target_ids=task.target_ids,
            missing_ids=task.missing_ids,
        )

    def to_dict(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for a, (lo, hi) in enumerate(zip(self.coord_lo, self.coord_hi)):
            out[f"coord_lo_{a + 1}"] = lo
            out[f"coord_hi_{a + 1}"] = hi
        out["value_mean"] = self.value_mean
        out["value_std"] = self.value_std
        return out

    @classmethod
    def from_dict(cls, d: dict[str, float]) -> "Normalizer":
        lo, hi = [], []
        for a in range(1, 3):
            if f"coord_lo_{a}" in d:
                lo.append(float(d[f"coord_lo_{a}"]))
                hi.append(float(d[f"coord_hi_{a}"]))
        return cls(
            coord_lo=tuple(lo),
            coord_hi=tuple(hi),
            value_mean=float(d["value_mean"]),
            value_std=float(d["value_std"]),
        )


def fit_normalizer(
    coord_domain: tuple[tuple[float, float], ...], values: np.ndarray
) -> Normalizer:
    """value_mean/value_std from a pre-training sample; coordinate bounds
    from the known raw data domain."""
    v = np.asarray(values, dtype=np.float64).ravel()
    return Normalizer(
        coord_lo=tuple(lo for lo, _ in coord_domain),
        coord_hi=tuple(hi for _, hi in coord_domain),
        value_mean=float(v.mean()),
        value_std=float(v.std()),
    )


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation schedule. Defaults follow the pre-training schedule;
    finetune_defaults() switches to the fine-tuning one."""

    learning_rate: float = 1e-4
    batch_size: int = 16
    batches_per_epoch: int = 200
    anneal_factor: float = 3.0
    anneal_patience_epochs: int = 8
    stop_patience_epochs: int = 20
    max_epochs: int = 500
    seed: int = 0
    improvement_tol: float = 1e-6

    def __post_init__(self) -> None:
        if min(self.batch_size, self.batches_per_epoch, self.stop_patience_epochs) <= 0:
            raise ConfigurationError("counts in TrainConfig must be positive")
        if self.anneal_factor <= 1:
            raise ConfigurationError("anneal_factor must be > 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")


def finetune_defaults(**overrides) -> TrainConfig:
    cfg = TrainConfig(
        learning_rate=3e-5,
        batches_per_epoch=25,
        stop_patience_epochs=30,
        max_epochs=400,
    )
    return replace(cfg, **overrides) if overrides else cfg


class EarlyStopper:
    """Best-tracking with patience counters.

    Improvement means a new best validation loss by more than tol. The
    learning rate anneals when the loss has stalled for more than
    anneal_patience epochs (counter resets on anneal); training stops after
    stop_patience epochs without improvement.
    """

    def __init__(self, anneal_patience: int, stop_patience: int, tol: float = 1e-6):
        self.anneal_patience = anneal_patience
        self.stop_patience = stop_patience
        self.tol = tol
        self.best = math.inf
        self.since_best = 0
        self.since_event = 0

    def update(self, val_loss: float) -> tuple[bool, bool, bool]:
        """Returns (improved, anneal_now, stop_now)."""
        if val_loss < self.best - self.tol:
            self.best = val_loss
            self.since_best = 0
            self.since_event = 0
            return True, False, False
        self.since_best += 1
        self.since_event += 1
        stop = self.since_best >= self.stop_patience
        anneal = not stop and self.since_event > self.anneal_patience
        if anneal:
            self.since_event = 0
        return False, anneal, stop


@dataclass
class EpochRecord:
    epoch: int
    train_nll: float
    val_nll: float
    lr: float
    seconds: float


@dataclass
class TrainResult:
    best_state: dict[str, torch.Tensor]
    best_val_nll: float
    best_epoch: int
    log: list[EpochRecord]
    stop_reason: str


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, log: list[EpochRecord]):
        super().__init__(message)
        self.log = log


def batch_nll(model: ConvCNP, tasks: list[Task]) -> torch.Tensor:
    nlls = model.task_nlls(tasks)
    finite = torch.isfinite(nlls)
    if not bool(finite.all()):
        raise NonFiniteLossError(int(torch.nonzero(~finite)[0]))
    return nlls.mean()


def mean_val_nll(model: ConvCNP, val_tasks: list[Task], batch_size: int = 16) -> float:
    """Mean per-task NLL on a fixed validation set (normalised units)."""
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(val_tasks), batch_size):
            chunk = val_tasks[i : i + batch_size]
            total += float(model.task_nlls(chunk).double().sum())
    return total / len(val_tasks)


def run_training(
    model: ConvCNP,
    task_stream: Iterator[Task],
    val_tasks: list[Task],
    config: TrainConfig,
) -> TrainResult:
    """Optimise the model's trainable parameters on batches drawn from
    task_stream (normalised tasks), tracking the checkpoint with the lowest
    validation NLL.

    Epoch 0 in the log is the initial validation before any update, so a
    run that never improves returns the starting parameters.
    """
    if not val_tasks:
        raise ConfigurationError("validation set must be non-empty")
    trainable = [p for p in model.parameters() if p.requires_grad]
    if not trainable:
        raise ConfigurationError("no trainable parameters")
    opt = torch.optim.Adam(trainable, lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    stopper = EarlyStopper(
        config.anneal_patience_epochs, config.stop_patience_epochs, config.improvement_tol
    )
    log: list[EpochRecord] = []
    lr = config.learning_rate

    def snapshot() -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in model.state_dict().items()}

    t0 = time.perf_counter()
    val0 = mean_val_nll(model, val_tasks, config.batch_size)
    if not math.isfinite(val0):
        raise TrainingDivergedError("initial validation NLL is non-finite", log)
    log.append(EpochRecord(0, math.nan, val0, lr, time.perf_counter() - t0))
    stopper.update(val0)
    best_state, best_val, best_epoch = snapshot(), val0, 0

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        train_total = 0.0
        for _ in range(config.batches_per_epoch):
            batch = [next(task_stream) for _ in range(config.batch_size)]
            opt.zero_grad()
            loss = batch_nll(model, batch)
            loss.backward()
            opt.step()
            train_total += float(loss.detach())
        train_nll = train_total / config.batches_per_epoch
        val_nll = mean_val_nll(model, val_tasks, config.batch_size)
        if not math.isfinite(val_nll):
            raise TrainingDivergedError(f"validation NLL diverged at epoch {epoch}", log)
        improved, anneal, stop = stopper.update(val_nll)
        log.append(EpochRecord(epoch, train_nll, val_nll, lr, time.perf_counter() - t0))
        if improved:
            best_state, best_val, best_epoch = snapshot(), val_nll, epoch
        if stop:
            return TrainResult(best_state, best_val, best_epoch, log, "early_stop")
        if anneal:
            lr = lr / config.anneal_factor
            for group in opt.param_groups:
                group["lr"] = lr
    return TrainResult(best_state, best_val, best_epoch, log, "max_epochs")


def batched_stream(tasks: Iterable[Task]) -> Iterator[Task]:
    """Cycle a fixed task list forever in shuffled passes handled upstream."""
    while True:
        yield from tasks


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


Predictor = Callable[[Task], GaussianPrediction]


class ModelPredictor:
    """Wraps a ConvCNP + Normalizer into a raw-unit task predictor."""

    def __init__(self, model: ConvCNP, normalizer: Normalizer):
        self.model = model
        self.normalizer = normalizer

    def __call__(self, task: Task) -> GaussianPrediction:
        t = self.normalizer.norm_task(task)
        pred = self.model.predict(t.x_context, t.y_context, t.x_target, t.aux)
        return GaussianPrediction(
            means=self.normalizer.denorm_y(pred.means),
            stds=pred.stds * self.normalizer.value_std,
        )


class OraclePredictor:
    """Exact GP posterior as a predictor (raw units)."""

    def __init__(self, components: list[SEKernelParams], noise_std: float):
        self.components = components
        self.noise_std = noise_std

    @classmethod
    def for_kernel(cls, params: SEKernelParams) -> "OraclePredictor":
        return cls([params], params.noise_std)

    def __call__(self, task: Task) -> GaussianPrediction:
        res = gp_posterior_oracle_sum(
            task.x_context, task.y_context, task.x_target, self.components, self.noise_std
        )
        return GaussianPrediction(means=res.means, stds=res.stds)


def evaluate(predictor: Predictor, tasks: list[Task]) -> tuple[float, float]:
    """(mean NLL per point, MAE per point) in raw, denormalised units.

    Both metrics are task means of per-point means, so small and large tasks
    weigh equally.
    """
    if not tasks:
        raise ConfigurationError("evaluate needs at least one task")
    nlls, maes = [], []
    for task in tasks:
        pred = predictor(task)
        nlls.append(nll_loss(pred, task.y_target))
        maes.append(float(np.mean(np.abs(task.y_target - pred.means))))
    return float(np.mean(nlls)), float(np.mean(maes))
