"""Sim2Real adaptation of a pre-trained checkpoint: global fine-tuning of
every parameter, or FiLM fine-tuning of only the per-feature-map affine
adapters with the backbone frozen."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

from sim2real_cnp.model import ConvCNP
from sim2real_cnp.tasks import Task
from sim2real_cnp.train import TrainConfig, TrainResult, finetune_defaults, run_training
from sim2real_cnp.util import ConfigurationError

STRATEGIES = ("global", "film")


@dataclass(frozen=True)
class AdaptationStrategy:
    """Which parameters to adapt, plus schedule overrides for fine-tuning."""

    kind: str  # global | film
    train_config: TrainConfig | None = None

    def __post_init__(self) -> None:
        if self.kind not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.kind!r}, expected one of {STRATEGIES}")

    def resolved_config(self, **overrides) -> TrainConfig:
        return self.train_config if self.train_config is not None else finetune_defaults(**overrides)


def set_trainable(model: ConvCNP, mode: str) -> None:
    """Mark parameter partitions trainable.

    pretrain: backbone only (FiLM parameters stay fixed at identity so the
    pre-trained backbone is strategy-agnostic); global: everything; film:
    FiLM parameters only.
    """
    if mode == "film" and not model.config.film_enabled:
        raise ConfigurationError("film fine-tuning requested but the checkpoint has no FiLM sites")
    for name, p in model.named_parameters():
        part = model.parameter_partition(name)
        if mode == "global":
            p.requires_grad_(True)
        elif mode == "film":
            p.requires_grad_(part == "film")
        elif mode == "pretrain":
            p.requires_grad_(part == "backbone")
        else:
            raise ConfigurationError(f"unknown trainable mode {mode!r}")


def count_trainable(model: ConvCNP, strategy_kind: str) -> int:
    """Number of parameters a strategy would train: everything for global,
    2 * sum of feature-map counts over FiLM sites for film."""
    if strategy_kind == "global":
        return model.count_parameters("all")
    if strategy_kind == "film":
        if not model.config.film_enabled:
            raise ConfigurationError("model has no FiLM sites")
        return model.count_parameters("film")
    raise ConfigurationError(f"unknown strategy {strategy_kind!r}")


def finetune(
    model: ConvCNP,
    strategy: AdaptationStrategy,
    task_stream: Iterator[Task],
    val_tasks: list[Task],
    config: TrainConfig | None = None,
) -> TrainResult:
    """Adapt a loaded checkpoint on a stream of normalised real tasks.

    The model is mutated in place and left at the best-validation state.
    Epoch 0 of the returned log is the un-adapted (0-shot) validation NLL.
    """
    cfg = config if config is not None else strategy.resolved_config()
    set_trainable(model, strategy.kind)
    result = run_training(model, task_stream, val_tasks, cfg)
    model.load_state_dict(result.best_state)
    return result
