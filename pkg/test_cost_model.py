#!/usr/bin/env python3
"""
Tests for the symbolic training-cost model
"""

import pytest

from cost_model import (cost_abnn, cost_no_defense, cost_oudefend, cost_pgd_at, cost_ratio, cost_table,
                        inference_cost_abnn, inference_cost_plain, predicted_cost, step_schedule,
                        verify_cost_model)
from error_handler import ConfigError
from training import PassCounter


def test_table_coefficients_at_five_iterations():
    assert str(cost_pgd_at(5)) == "12N"
    assert str(cost_oudefend(5)) == "24N"
    assert str(cost_abnn()) == "3N"
    assert str(cost_no_defense()) == "2N"


def test_cost_ratio():
    assert cost_ratio(5) == 4.0
    assert cost_ratio(2) == 2.0
    assert cost_ratio(1) == pytest.approx(4 / 3)


def test_t_max_must_be_positive():
    with pytest.raises(ConfigError):
        cost_pgd_at(0)
    with pytest.raises(ConfigError):
        cost_oudefend(0)


def test_inference_overhead_is_the_substitute():
    assert inference_cost_abnn() - inference_cost_plain() == 1


@pytest.mark.parametrize("method,t_max", [("no-defense", None), ("abnn", None), ("pgd-at", 1),
                                          ("pgd-at", 5), ("oudefend", 5)])
def test_schedules_match_predictions(method, t_max):
    schedule = step_schedule(method, t_max)
    assert len(schedule) == predicted_cost(method, t_max).coefficient
    counter = PassCounter().replay(schedule, steps=3)
    assert counter.step_totals == [len(schedule)] * 3
    assert verify_cost_model(counter, predicted_cost(method, t_max))


def test_abnn_schedule_is_two_forwards_one_backward():
    counter = PassCounter().replay(step_schedule("abnn"))
    assert counter.total_forward == 2
    assert counter.total_backward == 1
    assert dict(counter.forward_passes) == {"substitute": 1, "target": 1}


def test_verify_rejects_mismatch_and_empty_counter():
    counter = PassCounter().replay(step_schedule("pgd-at", 5))
    assert verify_cost_model(counter, cost_pgd_at(5))
    assert not verify_cost_model(counter, cost_abnn())
    assert not verify_cost_model(PassCounter(), cost_abnn())


def test_cost_table_ratios():
    rows = {row["method"]: row for row in cost_table(5)}
    assert rows["pgd-at"]["ratio_to_abnn"] == 4.0
    assert rows["oudefend"]["ratio_to_abnn"] == 8.0
    assert rows["abnn"]["training_cost"] == "3N"


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v"]))
