# gradcheck.py - Finite-difference checks of every differentiable operation and the ABNN composite

import logging
from typing import Callable, Dict, List, Tuple

import numpy as np

from networks import ABNNModel, build_substitute, build_target, freeze
from normalization import AdaINEncoder, AdaptiveBNLayer, BatchNormLayer
from tensor import (Tensor, avg_pool2d, concat, conv2d, finite_diff_check, get_default_dtype, global_avg_pool,
                    linear, relu, set_default_dtype, softmax_cross_entropy)

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-4

# (name, builder) where builder(rng) -> (f, point)
CaseBuilder = Callable[[np.random.Generator], Tuple[Callable[[Tensor], Tensor], np.ndarray]]


def _weighted(shape, rng):
    """Random weights w so f(x) = sum(op(x) * w) is a generic scalar"""
    return Tensor(rng.normal(size=shape))


def _away_from_zero(x: np.ndarray, gap: float = 0.1) -> np.ndarray:
    return np.sign(x) * (np.abs(x) + gap) + (x == 0) * gap


def _elementwise(op):
    def build(rng):
        x = rng.normal(size=(3, 4))
        w = _weighted(x.shape, rng)
        return (lambda t: (op(t) * w).sum()), x
    return build


def _positive(op):
    def build(rng):
        x = np.abs(rng.normal(size=(3, 4))) + 0.5
        w = _weighted(x.shape, rng)
        return (lambda t: (op(t) * w).sum()), x
    return build


def _binary(op):
    def build(rng):
        other = Tensor(np.abs(rng.normal(size=(3, 4))) + 0.5)
        x = rng.normal(size=(3, 4))
        w = _weighted(x.shape, rng)
        return (lambda t: (op(t, other) * w).sum()), x
    return build


def _reduction(axis):
    def build(rng):
        x = rng.normal(size=(2, 3, 4))
        w = _weighted(np.sum(x, axis=axis).shape, rng)
        return (lambda t: (t.mean(axis=axis) * w).sum() + t.sum()), x
    return build


def _matmul(rng):
    x = rng.normal(size=(3, 4))
    other = Tensor(rng.normal(size=(4, 2)))
    w = _weighted((3, 2), rng)
    return (lambda t: (t @ other * w).sum()), x


def _reshape_getitem(rng):
    x = rng.normal(size=(2, 6))
    w = _weighted((3, 2), rng)
    return (lambda t: (t.reshape(3, 4)[:, 1:3] * w).sum()), x


def _concat(rng):
    x = rng.normal(size=(2, 3))
    other = Tensor(rng.normal(size=(2, 2)))
    w = _weighted((2, 5), rng)
    return (lambda t: (concat([t, other], axis=1) * w).sum()), x


def _relu(rng):
    x = _away_from_zero(rng.normal(size=(3, 5)))
    w = _weighted(x.shape, rng)
    return (lambda t: (relu(t) * w).sum()), x


def _linear_input(rng):
    x = rng.normal(size=(4, 3))
    weight, bias = Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=2))
    w = _weighted((4, 2), rng)
    return (lambda t: (linear(t, weight, bias) * w).sum()), x


def _linear_weight(rng):
    x = Tensor(rng.normal(size=(4, 3)))
    bias = Tensor(rng.normal(size=2))
    w = _weighted((4, 2), rng)
    return (lambda t: (linear(x, t, bias) * w).sum()), rng.normal(size=(3, 2))


def _conv_input(stride, padding):
    def build(rng):
        x = rng.normal(size=(2, 2, 5, 5))
        kernel = Tensor(rng.normal(size=(3, 2, 3, 3)))
        out_shape = conv2d(Tensor(x), kernel, stride, padding).shape
        w = _weighted(out_shape, rng)
        return (lambda t: (conv2d(t, kernel, stride, padding) * w).sum()), x
    return build


def _conv_kernel(rng):
    x = Tensor(rng.normal(size=(2, 2, 5, 5)))
    kernel = rng.normal(size=(3, 2, 3, 3))
    w = _weighted((2, 3, 5, 5), rng)
    return (lambda t: (conv2d(x, t, 1, 1) * w).sum()), kernel


def _pooling(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    w_avg = _weighted((2, 3, 2, 2), rng)
    w_gap = _weighted((2, 3), rng)
    return (lambda t: (avg_pool2d(t, 2) * w_avg).sum() + (global_avg_pool(t) * w_gap).sum()), x


def _cross_entropy(rng):
    x = rng.normal(size=(5, 4))
    labels = rng.integers(0, 4, size=5)
    return (lambda t: softmax_cross_entropy(t, labels)), x


def _batch_norm(rng):
    layer = BatchNormLayer(3)
    layer.gamma.data[...] = rng.normal(size=3)
    layer.beta.data[...] = rng.normal(size=3)
    x = rng.normal(size=(4, 3, 3, 3))
    w = _weighted(x.shape, rng)
    return (lambda t: (layer(t) * w).sum()), x


def _adaptive_bn_target(rng):
    layer = AdaptiveBNLayer(AdaINEncoder(2, 3, rng=rng, init_scale=0.5))
    z_s = Tensor(rng.normal(size=(4, 2, 3, 3)))
    x = rng.normal(size=(4, 3, 3, 3))
    w = _weighted(x.shape, rng)
    return (lambda t: (layer(t, z_s) * w).sum()), x


def _adaptive_bn_substitute(rng):
    """Gradient through the substitute statistics (composite attack path)"""
    layer = AdaptiveBNLayer(AdaINEncoder(2, 3, rng=rng, init_scale=0.5))
    z_t = Tensor(rng.normal(size=(4, 3, 3, 3)))
    x = rng.normal(size=(4, 2, 3, 3))
    w = _weighted(z_t.shape, rng)
    return (lambda t: (layer(z_t, t, detach_substitute=False) * w).sum()), x


def _abnn_composite(rng):
    seed = int(rng.integers(0, 2 ** 31))
    substitute = build_substitute([(4, 3, 1, True), (4, 3, 1, False)], 3, seed=seed)
    freeze(substitute)
    target = build_target([(4, 3, 1, True), (5, 3, 1, False)], 2,
                          substitute_specs=[(4, 3, 1, True), (4, 3, 1, False)], seed=seed + 1)
    for layer in target.adaptive:
        layer.encoder.weight.data[...] = rng.uniform(-0.3, 0.3, size=layer.encoder.weight.shape)
    model = ABNNModel(target, substitute, attack_mode="composite").eval()
    x = rng.uniform(0.0, 1.0, size=(3, 3, 6, 6))
    labels = rng.integers(0, 2, size=3)
    return (lambda t: softmax_cross_entropy(model(t), labels)), x


GRADCHECK_CASES: List[Tuple[str, CaseBuilder]] = [
    ("add", _binary(lambda a, b: a + b)),
    ("sub", _binary(lambda a, b: b - a)),
    ("mul", _binary(lambda a, b: a * b)),
    ("div", _binary(lambda a, b: a / b)),
    ("rdiv", _positive(lambda a: 1.0 / a)),
    ("neg", _elementwise(lambda a: -a)),
    ("sqrt", _positive(lambda a: a.sqrt())),
    ("exp", _elementwise(lambda a: a.exp())),
    ("log", _positive(lambda a: a.log())),
    ("sigmoid", _elementwise(lambda a: a.sigmoid())),
    ("softplus", _elementwise(lambda a: a.softplus())),
    ("mean_sum", _reduction((0, 2))),
    ("matmul", _matmul),
    ("reshape_getitem", _reshape_getitem),
    ("concat", _concat),
    ("relu", _relu),
    ("linear_input", _linear_input),
    ("linear_weight", _linear_weight),
    ("conv2d_input", _conv_input(1, 1)),
    ("conv2d_strided", _conv_input(2, 0)),
    ("conv2d_kernel", _conv_kernel),
    ("pooling", _pooling),
    ("softmax_cross_entropy", _cross_entropy),
    ("batch_norm", _batch_norm),
    ("adaptive_bn_target", _adaptive_bn_target),
    ("adaptive_bn_substitute", _adaptive_bn_substitute),
    ("abnn_composite", _abnn_composite),
]


def run_gradcheck_suite(cases_per_op: int = 4, seed: int = 0, h: float = 1e-6) -> Dict[str, float]:
    """Worst relative error per operation over cases_per_op random cases, in float64"""
    previous = "float32" if get_default_dtype() == np.float32 else "float64"
    set_default_dtype("float64")
    rng = np.random.default_rng(seed)
    worst = {}
    try:
        for name, build in GRADCHECK_CASES:
            errors = []
            for _ in range(cases_per_op):
                f, point = build(rng)
                errors.append(finite_diff_check(f, point, h=h))
            worst[name] = max(errors)
            logger.debug("gradcheck %s: %.3e", name, worst[name])
    finally:
        set_default_dtype(previous)
    return worst


def gradcheck_passed(results: Dict[str, float], tolerance: float = GRADCHECK_TOLERANCE) -> bool:
    return all(error < tolerance for error in results.values())
