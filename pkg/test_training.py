#!/usr/bin/env python3
"""
Tests for SGD, pass counting and the three training procedures
"""

import numpy as np
import pytest

from attacks import PGDConfig, attack_counter
from conftest import tiny_abnn, tiny_plain, tiny_task
from cost_model import cost_abnn, cost_no_defense, cost_pgd_at, verify_cost_model
from error_handler import ConfigError, FrozenParameterError, SubstituteNotFrozenError, TrainingDivergedError
from networks import assert_frozen, build_substitute, parameter_digest
from tensor import Parameter
from training import SGD, PassCounter, SGDConfig, pretrain_substitute, train_pgd_at, train_plain, train_target

TINY_SUBSTITUTE = [(4, 3, 1, True), (6, 3, 1, False)]


def one_epoch(batch_size=8, seed=0):
    return SGDConfig(learning_rate=0.05, momentum=0.9, epochs=1, batch_size=batch_size, seed=seed)


def test_config_validation():
    with pytest.raises(ConfigError):
        SGDConfig(batch_size=1)
    with pytest.raises(ConfigError):
        SGDConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        SGDConfig(schedule="cosine")


def test_step_schedule():
    config = SGDConfig(learning_rate=0.1, schedule="step", step_epochs=2, gamma=0.5)
    assert config.lr_at(0) == config.lr_at(1) == 0.1
    assert config.lr_at(2) == pytest.approx(0.05)


def test_optimizer_refuses_frozen_parameters():
    with pytest.raises(FrozenParameterError):
        SGD([Parameter(np.ones(2), name="w", frozen=True)], one_epoch())


def test_optimizer_momentum_update():
    p = Parameter(np.array([1.0]), name="w")
    optimizer = SGD([p], SGDConfig(learning_rate=0.1, momentum=0.5))
    p.grad = np.array([1.0])
    optimizer.step(0.1)
    p.grad = np.array([1.0])
    optimizer.step(0.1)
    # v1 = 1, v2 = 0.5 + 1 = 1.5
    assert p.data[0] == pytest.approx(1.0 - 0.1 - 0.15)


def test_optimizer_skips_parameters_off_the_loss_path():
    used, unused = Parameter(np.array([1.0]), name="used"), Parameter(np.array([1.0]), name="unused")
    optimizer = SGD([used, unused], SGDConfig(learning_rate=0.1, momentum=0.9))
    optimizer.zero_grad()
    (used * 3.0).sum().backward()
    optimizer.step(0.1)
    assert used.data[0] == pytest.approx(0.7)
    assert unused.data[0] == 1.0 and unused.grad is None


def test_optimizer_flags_divergence():
    p = Parameter(np.array([1.0]), name="w")
    p.grad = np.array([np.inf])
    with pytest.raises(TrainingDivergedError):
        SGD([p], one_epoch()).step(0.1)


def test_abnn_single_step_counts_three_passes():
    data = tiny_task(num_samples=8)
    result = train_target(data, tiny_abnn(), one_epoch(batch_size=8))
    assert result.counter.step_totals == [3]
    assert result.counter.total_forward == 2
    assert result.counter.total_backward == 1
    assert dict(result.counter.forward_passes) == {"substitute": 1, "target": 1}
    assert dict(result.counter.backward_passes) == {"target": 1}


def test_abnn_training_is_clean_only_and_leaves_substitute_untouched():
    data = tiny_task(num_samples=32)
    model = tiny_abnn()
    digest = parameter_digest(model.substitute)
    calls = attack_counter.calls
    result = train_target(data, model, SGDConfig(epochs=2, batch_size=8, learning_rate=0.05))
    assert result.steps == 8
    assert result.counter.total_passes == 3 * 8
    assert verify_cost_model(result.counter, cost_abnn())
    assert result.clean_only and attack_counter.calls == calls
    assert parameter_digest(model.substitute) == digest


def test_target_training_refuses_unfrozen_substitute():
    with pytest.raises(SubstituteNotFrozenError):
        train_target(tiny_task(num_samples=8), tiny_abnn(frozen=False), one_epoch())


@pytest.mark.parametrize("t_max,passes", [(1, 4), (5, 12)])
def test_pgd_at_pass_counts(t_max, passes):
    result = train_pgd_at(tiny_task(num_samples=16), tiny_plain(), one_epoch(),
                          PGDConfig(epsilon=8 / 255, t_max=t_max))
    assert result.counter.step_totals == [passes, passes]
    assert verify_cost_model(result.counter, cost_pgd_at(t_max))
    assert not verify_cost_model(result.counter, cost_abnn())


def test_pgd_at_needs_iterations():
    with pytest.raises(ConfigError):
        train_pgd_at(tiny_task(num_samples=8), tiny_plain(), one_epoch(), PGDConfig(t_max=0))


def test_plain_training_counts_two_passes():
    result = train_plain(tiny_task(num_samples=16), tiny_plain(), one_epoch())
    assert verify_cost_model(result.counter, cost_no_defense())


def test_pretraining_learns_and_freezes():
    data = tiny_task(num_samples=64, class_offset=0)
    model = build_substitute(TINY_SUBSTITUTE, 2)
    result = pretrain_substitute(data, model, SGDConfig(epochs=6, batch_size=16, learning_rate=0.05))
    assert result.epoch_losses[-1] < result.epoch_losses[0]
    assert assert_frozen(model)


def test_fixed_seed_gives_identical_parameters():
    digests = []
    for _ in range(2):
        model = tiny_abnn(seed=3)
        train_target(tiny_task(num_samples=16, seed=4), model, SGDConfig(epochs=2, batch_size=8, seed=11))
        digests.append(parameter_digest(model.target))
    assert digests[0] == digests[1]


def test_counter_dict_round_trip():
    counter = PassCounter()
    counter.on_forward("plain")
    counter.on_backward({"plain"})
    counter.end_step()
    restored = PassCounter.from_dict(counter.as_dict())
    assert restored.step_totals == [2]
    assert restored.as_dict() == counter.as_dict()


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v"]))
