# training.py - SGD, pass counting and the three training procedures

import contextlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional

import numpy as np
from tqdm import tqdm

from attacks import PGDConfig, attack_counter, pgd_perturb
from cost_model import PassEvent
from defaults import SGD as SGD_DEFAULTS
from error_handler import (ABNNError, ConfigError, DatasetError, FrozenParameterError, NonFiniteError,
                           SubstituteNotFrozenError, TrainingDivergedError)
from logging_setup import progress_disabled
from networks import ABNNModel, assert_frozen, freeze
from tensor import Parameter, Tensor, listening, softmax_cross_entropy

logger = logging.getLogger(__name__)

SCHEDULES = ("constant", "step")


@dataclass
class SGDConfig:
    learning_rate: float = SGD_DEFAULTS["learning_rate"]
    momentum: float = SGD_DEFAULTS["momentum"]
    epochs: int = SGD_DEFAULTS["epochs"]
    batch_size: int = SGD_DEFAULTS["batch_size"]
    seed: int = 0
    weight_decay: float = SGD_DEFAULTS["weight_decay"]
    schedule: str = SGD_DEFAULTS["schedule"]
    step_epochs: int = SGD_DEFAULTS["step_epochs"]
    gamma: float = SGD_DEFAULTS["gamma"]

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2 for batch statistics, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.weight_decay < 0 or self.step_epochs < 1 or not 0.0 < self.gamma <= 1.0:
            raise ConfigError("weight_decay >= 0, step_epochs >= 1 and 0 < gamma <= 1 are required")

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "step":
            return self.learning_rate * self.gamma ** (epoch // self.step_epochs)
        return self.learning_rate


class SGD:
    """Heavy-ball SGD: v = m*v + g (+ wd*w); w -= lr*v"""

    def __init__(self, params: Iterable[Parameter], config: SGDConfig):
        self.params = list(params)
        frozen = [p.name for p in self.params if p.frozen]
        if frozen:
            raise FrozenParameterError("optimizer was handed frozen parameters", details=", ".join(frozen[:5]))
        self.config = config
        self.velocity = {id(p): np.zeros_like(p.data) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float):
        for p in self.params:
            if p.frozen:
                raise FrozenParameterError(f"refusing to update frozen parameter {p.name}")
            if p.grad is None:
                continue
            grad = p.grad + self.config.weight_decay * p.data if self.config.weight_decay else p.grad
            v = self.velocity[id(p)]
            v *= self.config.momentum
            v += grad
            p.data -= lr * v
            if not np.all(np.isfinite(p.data)):
                raise TrainingDivergedError(f"parameter {p.name} became non-finite")


@dataclass
class PassCounter:
    """Per-network forward/backward tallies plus the pass total of each training step"""
    forward_passes: Dict[str, int] = field(default_factory=Counter)
    backward_passes: Dict[str, int] = field(default_factory=Counter)
    step_totals: List[int] = field(default_factory=list)
    _current: int = 0

    def on_forward(self, network: str):
        self.forward_passes[network] += 1
        self._current += 1

    def on_backward(self, networks):
        for network in sorted(networks):
            self.backward_passes[network] += 1
            self._current += 1

    def end_step(self):
        self.step_totals.append(self._current)
        self._current = 0

    @contextlib.contextmanager
    def step(self):
        """Count every pass made inside the block as one training step"""
        with listening(self):
            yield self
        self.end_step()

    def replay(self, schedule: List[PassEvent], steps: int = 1) -> "PassCounter":
        for _ in range(steps):
            for event in schedule:
                if event.direction == "forward":
                    self.on_forward(event.network)
                else:
                    self.on_backward({event.network})
            self.end_step()
        return self

    @property
    def steps(self) -> int:
        return len(self.step_totals)

    @property
    def total_forward(self) -> int:
        return sum(self.forward_passes.values())

    @property
    def total_backward(self) -> int:
        return sum(self.backward_passes.values())

    @property
    def total_passes(self) -> int:
        return self.total_forward + self.total_backward

    def passes_per_step(self) -> Optional[int]:
        """The common per-step total, or None when steps differ or none ran"""
        if not self.step_totals or len(set(self.step_totals)) != 1:
            return None
        return self.step_totals[0]

    def as_dict(self) -> Dict[str, Any]:
        return {
            "forward_passes": dict(sorted(self.forward_passes.items())),
            "backward_passes": dict(sorted(self.backward_passes.items())),
            "steps": self.steps,
            "total_forward": self.total_forward,
            "total_backward": self.total_backward,
            "total_passes": self.total_passes,
            "passes_per_step": self.passes_per_step(),
            "step_totals": list(self.step_totals),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PassCounter":
        return cls(forward_passes=Counter(data.get("forward_passes", {})),
                   backward_passes=Counter(data.get("backward_passes", {})),
                   step_totals=list(data.get("step_totals", [])))


@dataclass
class TrainingResult:
    model: Any
    counter: PassCounter
    epoch_losses: List[float]
    method: str
    clean_only: bool = True

    @property
    def steps(self) -> int:
        return self.counter.steps

    def summary(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "epoch_losses": self.epoch_losses,
            "clean_only": self.clean_only,
            **self.counter.as_dict(),
        }


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2:
            yield idx


def _fit(model, dataset, config: SGDConfig, params: List[Parameter], step_fn: Callable, method: str) -> TrainingResult:
    if len(dataset) < 2:
        raise DatasetError(f"{method}: need at least 2 training samples, got {len(dataset)}")
    rng = np.random.default_rng(config.seed)
    optimizer = SGD(params, config)
    counter = PassCounter()
    epoch_losses = []
    model.train()

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        losses = []
        batches = list(_batches(len(dataset), config.batch_size, rng))
        for idx in tqdm(batches, desc=f"{method} epoch {epoch + 1}/{config.epochs}", leave=False,
                        disable=progress_disabled()):
            optimizer.zero_grad()
            try:
                with counter.step():
                    loss = step_fn(dataset.images[idx], dataset.labels[idx])
            except NonFiniteError as e:
                raise TrainingDivergedError(f"{method}: non-finite value at epoch {epoch + 1}", details=e.message)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"{method}: non-finite loss at epoch {epoch + 1}")
            optimizer.step(lr)
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))
        logger.info("%s epoch %d/%d: loss %.4f (lr %.4g)", method, epoch + 1, config.epochs, epoch_losses[-1], lr)

    model.eval()
    return TrainingResult(model=model, counter=counter, epoch_losses=epoch_losses, method=method)


def _clean_step(model):
    def step(xb, yb):
        loss = softmax_cross_entropy(model(Tensor(xb)), yb)
        loss.backward()
        return loss.item()
    return step


def train_plain(dataset, model, config: SGDConfig) -> TrainingResult:
    """Clean training of a standard-BN model: one forward and one backward per step"""
    return _fit(model, dataset, config, model.parameters(), _clean_step(model), "no-defense")


def pretrain_substitute(dataset, model, config: SGDConfig) -> TrainingResult:
    """Clean training on the disjoint pre-training task, then freeze"""
    if assert_frozen(model):
        raise ConfigError("substitute is already frozen; load it instead of pre-training again")
    result = _fit(model, dataset, config, model.parameters(), _clean_step(model), "substitute")
    freeze(model)
    return result


def train_target(dataset, abnn: ABNNModel, config: SGDConfig) -> TrainingResult:
    """
    Clean-only training of the target blocks, encoders and head. The frozen
    substitute runs without a graph, so each step is one substitute forward,
    one target forward and one target backward.
    """
    if not assert_frozen(abnn.substitute):
        raise SubstituteNotFrozenError("substitute must be frozen before training the target")
    calls_before = attack_counter.calls
    result = _fit(abnn, dataset, config, abnn.parameters(), _clean_step(abnn), "abnn")
    result.clean_only = attack_counter.calls == calls_before
    if not result.clean_only:
        raise ABNNError("target training invoked an attack operation")
    return result


def train_pgd_at(dataset, model, config: SGDConfig, pgd: PGDConfig) -> TrainingResult:
    """Madry-style adversarial training: t_max attack iterations, then one training pass pair"""
    if pgd.t_max < 1:
        raise ConfigError("PGD adversarial training needs t_max >= 1")
    attack_rng = np.random.default_rng(config.seed + 1)

    def step(xb, yb):
        x_adv = pgd_perturb(model, xb, yb, pgd, rng=attack_rng)
        loss = softmax_cross_entropy(model(Tensor(x_adv)), yb)
        loss.backward()
        return loss.item()

    result = _fit(model, dataset, config, model.parameters(), step, "pgd-at")
    result.clean_only = False
    return result
