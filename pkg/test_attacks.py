#!/usr/bin/env python3
"""
Tests for PGD and ROA: constraint satisfaction, pass counts and determinism
"""

import os

import numpy as np
import pytest

from attacks import (PGDConfig, ROAConfig, attack_counter, evaluate_under_attack, export_adversarial, pgd_attack,
                     pgd_perturb, rectangle_shape, roa_attack)
from conftest import tiny_abnn, tiny_plain, tiny_task
from datasets import DatasetContainer, load_container
from error_handler import AttackError, ConfigError
from tensor import Parameter, Tensor, linear, no_grad, softmax_cross_entropy
from training import PassCounter
from visualize import PIL_AVAILABLE, save_attack_preview


@pytest.fixture
def batch():
    rng = np.random.default_rng(0)
    return rng.uniform(size=(6, 3, 16, 16)), rng.integers(0, 2, size=6)


def test_default_step_size():
    config = PGDConfig(epsilon=8 / 255, t_max=5)
    assert config.step_size == pytest.approx(2.5 * (8 / 255) / 5)
    assert PGDConfig(epsilon=0.1, t_max=0).step_size == 0.0


def test_config_ranges():
    with pytest.raises(ConfigError):
        PGDConfig(epsilon=1.0)
    with pytest.raises(ConfigError):
        PGDConfig(t_max=-1)
    with pytest.raises(ConfigError):
        ROAConfig(area_fraction=0.0)


@pytest.mark.parametrize("make_model", [tiny_plain, tiny_abnn])
def test_pgd_stays_in_ball_and_range(make_model, batch):
    x, y = batch
    config = PGDConfig(epsilon=8 / 255, t_max=3)
    example = pgd_attack(make_model(), x, y, config, seed=1)
    assert np.all(np.abs(example.x_adv - x) <= config.epsilon + 1e-9)
    assert example.x_adv.min() >= 0.0 and example.x_adv.max() <= 1.0
    assert example.success.shape == (6,)
    assert 0.0 <= example.success_rate <= 1.0


def test_pgd_with_zero_budget_is_identity(batch):
    x, y = batch
    model = tiny_plain()
    assert np.array_equal(pgd_perturb(model, x, y, PGDConfig(epsilon=0.0, t_max=3)), x)
    assert np.array_equal(pgd_perturb(model, x, y, PGDConfig(t_max=0, random_start=False)), x)


def test_pgd_raises_the_loss(batch):
    x, y = batch
    example = pgd_attack(tiny_plain(), x, y, PGDConfig(epsilon=0.05, t_max=5, random_start=False))
    assert example.loss_after >= example.loss_before


def test_pgd_uses_exactly_t_max_pass_pairs(batch):
    x, y = batch
    counter = PassCounter()
    with counter.step():
        pgd_perturb(tiny_plain(), x, y, PGDConfig(t_max=4))
    assert counter.step_totals == [8]
    assert counter.forward_passes == {"plain": 4}
    assert counter.backward_passes == {"plain": 4}


def test_attack_restores_mode_and_clears_gradients(batch):
    x, y = batch
    model = tiny_plain().train()
    pgd_attack(model, x, y, PGDConfig(t_max=2))
    assert model.training
    assert all(p.grad is None for p in model.parameters())


def test_attack_counter_counts_invocations(batch):
    x, y = batch
    before = attack_counter.calls
    pgd_perturb(tiny_plain(), x, y, PGDConfig(t_max=1))
    assert attack_counter.calls == before + 1
    assert attack_counter.last == "pgd"


class PixelLogistic:
    """Two-class logistic regression on one pixel: logits (0, w * x + b)"""

    def __init__(self, w: float, b: float):
        self.weight = Parameter(np.array([[0.0, w]]), name="weight")
        self.bias = Parameter(np.array([0.0, b]), name="bias")
        self.training = True

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x.reshape(x.shape[0], 1), self.weight, self.bias)

    def train(self, mode: bool = True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        self.weight.grad = None
        self.bias.grad = None


def pixels(values):
    return np.asarray(values, dtype=np.float64).reshape(-1, 1, 1, 1)


@pytest.mark.parametrize("w,labels", [(8.0, [0, 1]), (-8.0, [1, 0])])
def test_pgd_step_follows_logistic_closed_form(w, labels):
    # ascent moves each sample towards the boundary at x = 0.5, whichever side the classes sit on
    model = PixelLogistic(w, -w / 2)
    config = PGDConfig(epsilon=0.1, t_max=1, step_size=0.05, random_start=False)
    x_adv = pgd_perturb(model, pixels([0.4, 0.6]), np.array(labels), config)
    np.testing.assert_allclose(x_adv.reshape(-1), [0.45, 0.55], rtol=1e-12)


def test_accuracy_never_rises_with_the_budget():
    model = PixelLogistic(8.0, -4.0)
    x = np.linspace(0.3, 0.7, 201)
    data = DatasetContainer(pixels(x), (x > 0.5).astype(np.int64), 2)
    clean = evaluate_under_attack(model, data, None, batch_size=64)
    accuracies = [evaluate_under_attack(model, data, PGDConfig(epsilon=k / 255, t_max=5), batch_size=64, seed=1)
                  for k in (0, 2, 4, 8)]
    assert accuracies[0] == clean == 1.0
    assert all(later <= earlier for earlier, later in zip(accuracies, accuracies[1:]))
    assert accuracies[-1] < accuracies[1] < clean


def test_pgd_accuracy_is_at_most_clean_accuracy():
    # every tenth label is wrong; ascent keeps those samples misclassified
    model = PixelLogistic(8.0, -4.0)
    x = np.linspace(0.3, 0.7, 201)
    labels = (x > 0.5).astype(np.int64)
    labels[::10] = 1 - labels[::10]
    data = DatasetContainer(pixels(x), labels, 2)
    clean = evaluate_under_attack(model, data, None, batch_size=64)
    assert clean < 1.0
    for epsilon in (2 / 255, 8 / 255, 0.1):
        assert evaluate_under_attack(model, data, PGDConfig(epsilon=epsilon, t_max=5), batch_size=64) <= clean


def test_pgd_is_deterministic_per_seed(batch):
    x, y = batch
    model = tiny_abnn(seed=2)
    config = PGDConfig(epsilon=8 / 255, t_max=3, step_size=1 / 255)
    first = pgd_attack(model, x, y, config, seed=9).x_adv
    assert np.array_equal(first, pgd_attack(model, x, y, config, seed=9).x_adv)
    assert not np.array_equal(first, pgd_attack(model, x, y, config, seed=10).x_adv)


def test_rectangle_shape_covers_ten_percent():
    assert rectangle_shape(32, 32, 0.10) == (10, 10)
    h, w = rectangle_shape(16, 16, 0.10)
    assert abs(h * w - 25.6) <= max(h, w)


def test_roa_changes_only_the_rectangle(batch):
    x, y = batch
    example = roa_attack(tiny_abnn(), x, y, ROAConfig())
    for i, (top, left, h, w) in enumerate(example.rectangles):
        outside = np.ones(x.shape[1:], dtype=bool)
        outside[:, top:top + h, left:left + w] = False
        assert np.array_equal(example.x_adv[i][outside], x[i][outside])
        assert abs(h * w - 0.10 * 16 * 16) <= max(h, w)
    assert example.x_adv.min() >= 0.0 and example.x_adv.max() <= 1.0


def test_roa_picks_the_worst_placement(batch):
    x, y = batch
    model = tiny_plain(seed=4).eval()
    config = ROAConfig(inner_pgd=PGDConfig(epsilon=0.0, t_max=0, step_size=0.0))
    example = roa_attack(model, x, y, config)

    h, w = rectangle_shape(16, 16, config.area_fraction)
    candidate_losses = {}
    for top in range(0, 16 - h + 1, config.search_stride):
        for left in range(0, 16 - w + 1, config.search_stride):
            filled = x.copy()
            filled[:, :, top:top + h, left:left + w] = config.fill_value
            with no_grad():
                losses = softmax_cross_entropy(model(Tensor(filled)), y, reduction="none").data
            candidate_losses[(top, left)] = losses
    worst = np.max(np.stack(list(candidate_losses.values())), axis=0)

    for i, (top, left, rh, rw) in enumerate(example.rectangles):
        assert (rh, rw) == (h, w)
        assert candidate_losses[(top, left)][i] == pytest.approx(worst[i], rel=1e-12)
        assert np.all(example.x_adv[i, :, top:top + h, left:left + w] == config.fill_value)


def test_roa_is_deterministic(batch):
    x, y = batch
    model = tiny_abnn(seed=2)
    first = roa_attack(model, x, y, ROAConfig())
    second = roa_attack(model, x, y, ROAConfig())
    assert np.array_equal(first.x_adv, second.x_adv)
    assert np.array_equal(first.rectangles, second.rectangles)


def test_roa_rectangle_must_fit(batch):
    x, y = batch
    with pytest.raises(AttackError):
        roa_attack(tiny_plain(), x, y, ROAConfig(rect_height=20, rect_width=4))


def test_zero_budget_attack_accuracy_equals_clean_accuracy():
    data = tiny_task(num_samples=20, image_size=8)
    model = tiny_abnn()
    clean = evaluate_under_attack(model, data, None, batch_size=8)
    attacked = evaluate_under_attack(model, data, PGDConfig(epsilon=0.0, t_max=2), batch_size=8)
    assert clean == attacked


def test_export_and_preview(tmp_path, batch):
    x, y = batch
    model = tiny_plain()
    pgd = pgd_attack(model, x, y, PGDConfig(t_max=1))
    roa = roa_attack(model, x, y, ROAConfig())
    path = str(tmp_path / "adv.npz")
    export_adversarial(pgd, 2, path)
    loaded = load_container(path)
    assert np.array_equal(loaded.images, pgd.x_adv)
    assert loaded.metadata["attack"] == "pgd"
    preview = save_attack_preview(x, pgd.x_adv, roa.x_adv, str(tmp_path / "preview.png"))
    if PIL_AVAILABLE:
        assert os.path.exists(preview)


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v"]))
