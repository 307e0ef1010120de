# conftest.py - Shared builders for the test suite

import numpy as np
import pytest

from datasets import SyntheticSpec, gen_synthetic
from defaults import RUN_SLOW
from networks import ABNNModel, build_plain, build_substitute, build_target, freeze
from tensor import get_default_dtype, set_default_dtype

TINY_SUBSTITUTE = [(4, 3, 1, True), (6, 3, 1, False)]
TINY_TARGET = [(4, 3, 1, True), (5, 3, 1, False)]


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip_slow = pytest.mark.skip(reason="set ABNN_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def float64_engine():
    previous = "float32" if get_default_dtype() == np.float32 else "float64"
    set_default_dtype("float64")
    yield
    set_default_dtype(previous)


def tiny_task(num_samples=32, image_size=8, class_offset=0, seed=0):
    spec = SyntheticSpec(num_samples=num_samples, image_size=image_size, num_classes=2, margin=1.0,
                         noise=0.1, blob_sigma=2.0, class_offset=class_offset)
    return gen_synthetic(spec, seed=seed)


def tiny_abnn(seed=0, attack_mode="composite", frozen=True):
    substitute = build_substitute(TINY_SUBSTITUTE, 2, seed=seed)
    if frozen:
        freeze(substitute)
    target = build_target(TINY_TARGET, 2, substitute_specs=TINY_SUBSTITUTE, seed=seed + 1)
    return ABNNModel(target, substitute, attack_mode=attack_mode)


def tiny_plain(seed=0):
    return build_plain(TINY_TARGET, 2, seed=seed)


@pytest.fixture
def task():
    return tiny_task()


@pytest.fixture
def abnn():
    return tiny_abnn()


@pytest.fixture
def plain():
    return tiny_plain()
