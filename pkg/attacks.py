# attacks.py - White-box PGD (L-infinity) and rectangular occlusion (ROA) attacks

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from defaults import PGD, ROA
from error_handler import AttackError, ConfigError, DatasetError
from networks import evaluating
from tensor import Tensor, no_grad, softmax_cross_entropy

logger = logging.getLogger(__name__)


class AttackCounter:
    """Counts attack invocations; training loops check it to prove clean-only training"""

    def __init__(self):
        self.calls = 0
        self.last: Optional[str] = None

    def record(self, name: str):
        self.calls += 1
        self.last = name


attack_counter = AttackCounter()


@dataclass
class PGDConfig:
    epsilon: float = PGD["epsilon"]
    t_max: int = PGD["t_max"]
    step_size: Optional[float] = PGD["step_size"]
    random_start: bool = PGD["random_start"]

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigError(f"PGD epsilon must lie in [0, 1), got {self.epsilon}")
        if int(self.t_max) != self.t_max or self.t_max < 0:
            raise ConfigError(f"PGD t_max must be a non-negative integer, got {self.t_max}")
        self.t_max = int(self.t_max)
        if self.step_size is None:
            self.step_size = 2.5 * self.epsilon / self.t_max if self.t_max else 0.0
        if self.step_size < 0:
            raise ConfigError(f"PGD step size must be non-negative, got {self.step_size}")


@dataclass
class ROAConfig:
    """Rectangle placement search then gradient steps inside it; inner_pgd.epsilon is unused"""
    area_fraction: float = ROA["area_fraction"]
    search_stride: int = ROA["search_stride"]
    inner_pgd: PGDConfig = field(default_factory=lambda: PGDConfig(
        epsilon=0.0, t_max=ROA["t_max"], step_size=ROA["step_size"], random_start=False))
    fill_value: float = ROA["fill_value"]
    rect_height: Optional[int] = None
    rect_width: Optional[int] = None

    def __post_init__(self):
        if not 0.0 < self.area_fraction <= 1.0:
            raise ConfigError(f"ROA area fraction must lie in (0, 1], got {self.area_fraction}")
        if self.search_stride < 1:
            raise ConfigError("ROA search stride must be positive")
        if not 0.0 <= self.fill_value <= 1.0:
            raise ConfigError("ROA fill value must lie in [0, 1]")

    def resolve(self, height: int, width: int) -> Tuple[int, int]:
        if self.rect_height is not None and self.rect_width is not None:
            h, w = self.rect_height, self.rect_width
        else:
            h, w = rectangle_shape(height, width, self.area_fraction)
        if not (1 <= h <= height and 1 <= w <= width):
            raise AttackError("occlusion rectangle does not fit the image",
                              details=f"rectangle {h}x{w}, image {height}x{width}")
        return h, w


def rectangle_shape(height: int, width: int, area_fraction: float) -> Tuple[int, int]:
    """Near-square rectangle covering about area_fraction of an HxW image"""
    target = area_fraction * height * width
    h = int(min(height, max(1, round(np.sqrt(target)))))
    w = int(min(width, max(1, round(target / h))))
    return h, w


@dataclass
class AdversarialExample:
    x_adv: np.ndarray
    x_clean: np.ndarray
    labels: np.ndarray
    success: np.ndarray
    loss_before: float
    loss_after: float
    attack: str
    rectangles: Optional[np.ndarray] = None  # [N,4] top, left, height, width
    placement_scores: Optional[np.ndarray] = None  # [positions, N]

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.success)) if self.success.size else 0.0

    @property
    def linf(self) -> float:
        return float(np.max(np.abs(self.x_adv - self.x_clean))) if self.x_adv.size else 0.0

    def summary(self) -> Dict[str, Any]:
        return {
            "attack": self.attack,
            "samples": int(self.labels.shape[0]),
            "success_rate": self.success_rate,
            "loss_before": self.loss_before,
            "loss_after": self.loss_after,
            "linf": self.linf,
        }


def _as_batch(x, y) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 4 or y.shape != (x.shape[0],):
        raise AttackError("attack expects images [N,C,H,W] and labels [N]", details=f"{x.shape} / {y.shape}")
    return x, y


def _input_gradient(model, x_adv: np.ndarray, y: np.ndarray) -> np.ndarray:
    """One forward and one backward pass: d loss / d input"""
    x = Tensor(x_adv, requires_grad=True)
    loss = softmax_cross_entropy(model(x), y)
    loss.backward()
    model.zero_grad()
    if x.grad is None:
        raise AttackError("loss does not depend on the input")
    if not np.all(np.isfinite(x.grad)):
        raise AttackError("non-finite input gradient", details=f"loss={loss.item()}")
    return x.grad


def _loss_and_predictions(model, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    with no_grad():
        logits = model(Tensor(x))
        losses = softmax_cross_entropy(logits, y, reduction="none")
    return losses.data, np.argmax(logits.data, axis=1)


def pgd_perturb(model, x, y, config: PGDConfig = None, rng: np.random.Generator = None) -> np.ndarray:
    """
    Iterated signed-gradient ascent on the loss, projected onto the
    epsilon-ball around x and onto [0,1]. Exactly t_max forward+backward passes.
    """
    config = config or PGDConfig()
    x_clean, y = _as_batch(x, y)
    rng = rng if rng is not None else np.random.default_rng(0)
    attack_counter.record("pgd")

    x_adv = x_clean.copy()
    if config.random_start and config.epsilon > 0:
        x_adv = np.clip(x_clean + rng.uniform(-config.epsilon, config.epsilon, size=x_clean.shape), 0.0, 1.0)

    with evaluating(model):
        for _ in range(config.t_max):
            grad = _input_gradient(model, x_adv, y)
            x_adv = x_adv + config.step_size * np.sign(grad)
            x_adv = np.clip(x_clean + np.clip(x_adv - x_clean, -config.epsilon, config.epsilon), 0.0, 1.0)
    return x_adv


def pgd_attack(model, x, y, config: PGDConfig = None, seed: int = 0) -> AdversarialExample:
    config = config or PGDConfig()
    x_clean, y = _as_batch(x, y)
    with evaluating(model):
        before, _ = _loss_and_predictions(model, x_clean, y)
        x_adv = pgd_perturb(model, x_clean, y, config, rng=np.random.default_rng(seed))
        after, predictions = _loss_and_predictions(model, x_adv, y)
    return AdversarialExample(x_adv=x_adv, x_clean=x_clean, labels=y, success=predictions != y,
                              loss_before=float(before.mean()), loss_after=float(after.mean()), attack="pgd")


def placement_grid(height: int, width: int, rect: Tuple[int, int], stride: int) -> List[Tuple[int, int]]:
    rh, rw = rect
    return [(top, left)
            for top in range(0, height - rh + 1, stride)
            for left in range(0, width - rw + 1, stride)]


def roa_attack(model, x, y, config: ROAConfig = None) -> AdversarialExample:
    """
    Phase 1: fill the rectangle with fill_value at every grid position and
    keep, per sample, the placement with the highest loss (first on ties).
    Phase 2: signed-gradient steps on the pixels inside the rectangle only,
    bounded by [0,1]; pixels outside stay bit-identical to x.
    """
    config = config or ROAConfig()
    x_clean, y = _as_batch(x, y)
    n, _, height, width = x_clean.shape
    rect = config.resolve(height, width)
    positions = placement_grid(height, width, rect, config.search_stride)
    attack_counter.record("roa")

    with evaluating(model):
        before, _ = _loss_and_predictions(model, x_clean, y)
        scores = np.empty((len(positions), n))
        for p, (top, left) in enumerate(positions):
            filled = x_clean.copy()
            filled[:, :, top:top + rect[0], left:left + rect[1]] = config.fill_value
            scores[p], _ = _loss_and_predictions(model, filled, y)
        best = np.argmax(scores, axis=0)

        mask = np.zeros(x_clean.shape, dtype=bool)
        rectangles = np.zeros((n, 4), dtype=np.int64)
        for i in range(n):
            top, left = positions[best[i]]
            mask[i, :, top:top + rect[0], left:left + rect[1]] = True
            rectangles[i] = (top, left, rect[0], rect[1])

        x_adv = np.where(mask, config.fill_value, x_clean)
        inner = config.inner_pgd
        for _ in range(inner.t_max):
            grad = _input_gradient(model, x_adv, y)
            x_adv = np.where(mask, np.clip(x_adv + inner.step_size * np.sign(grad), 0.0, 1.0), x_clean)
        after, predictions = _loss_and_predictions(model, x_adv, y)

    return AdversarialExample(x_adv=x_adv, x_clean=x_clean, labels=y, success=predictions != y,
                              loss_before=float(before.mean()), loss_after=float(after.mean()), attack="roa",
                              rectangles=rectangles, placement_scores=scores)


def run_attack(model, x, y, attack: Union[PGDConfig, ROAConfig], seed: int = 0) -> AdversarialExample:
    if isinstance(attack, PGDConfig):
        return pgd_attack(model, x, y, attack, seed=seed)
    if isinstance(attack, ROAConfig):
        return roa_attack(model, x, y, attack)
    raise AttackError(f"unknown attack configuration {type(attack).__name__}")


def evaluate_under_attack(model, dataset, attack: Union[PGDConfig, ROAConfig, None] = None,
                          batch_size: int = 128, seed: int = 0) -> float:
    """Accuracy on dataset after attacking each batch (attack=None: clean accuracy)"""
    if len(dataset) == 0:
        raise DatasetError("cannot evaluate on an empty dataset")
    correct = 0
    with evaluating(model):
        for b, start in enumerate(range(0, len(dataset), batch_size)):
            xb = dataset.images[start:start + batch_size]
            yb = dataset.labels[start:start + batch_size]
            if attack is not None:
                xb = run_attack(model, xb, yb, attack, seed=seed + b).x_adv
            _, predictions = _loss_and_predictions(model, np.asarray(xb, dtype=np.float64), yb)
            correct += int(np.sum(predictions == yb))
    accuracy = correct / len(dataset)
    logger.debug("accuracy under %s: %.4f", type(attack).__name__ if attack else "no attack", accuracy)
    return accuracy


def export_adversarial(example: AdversarialExample, num_classes: int, path: str, metadata: Dict[str, Any] = None):
    """Persist adversarial images with their true labels as a dataset container"""
    from datasets import DatasetContainer, save_container

    meta = dict(metadata or {})
    meta.update(example.summary())
    if example.rectangles is not None:
        meta["rectangles"] = example.rectangles.tolist()
    save_container(DatasetContainer(example.x_adv, example.labels, num_classes, meta), path)
