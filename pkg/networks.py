# networks.py - Toy backbones, the substitute/target pair and the ABNN composite

import contextlib
import hashlib
import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from defaults import NORM, INPUT_SHAPE
from error_handler import BlockMapError, CheckpointError, ConfigError, ShapeError
from normalization import AdaINEncoder, AdaptiveBNLayer, BatchNormLayer
from tensor import (Parameter, Tensor, _conv_output_extent, avg_pool2d, conv2d, global_avg_pool,
                    is_grad_enabled, linear, network_scope, no_grad, relu)

logger = logging.getLogger(__name__)

ATTACK_MODES = ("composite", "target_only")


@dataclass(frozen=True)
class ConvBlockSpec:
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    pool: bool = False

    def __post_init__(self):
        if self.out_channels < 1 or self.kernel_size < 1 or self.stride < 1:
            raise ConfigError(
                "block extents must be positive",
                details=f"out_channels={self.out_channels}, kernel_size={self.kernel_size}, stride={self.stride}",
            )

    @classmethod
    def from_value(cls, value) -> "ConvBlockSpec":
        if isinstance(value, ConvBlockSpec):
            return value
        if isinstance(value, dict):
            return cls(**value)
        return cls(*value)


def to_specs(values: Iterable) -> List[ConvBlockSpec]:
    specs = [ConvBlockSpec.from_value(v) for v in values]
    if not specs:
        raise ConfigError("a network needs at least one conv block")
    return specs


POOL_WINDOW = 2


def block_extents(specs: Iterable, input_size: int) -> List[int]:
    """Spatial extent after each block for a square input; ConfigError names the first block that does not fit"""
    size = input_size
    extents = []
    for i, spec in enumerate(to_specs(specs)):
        size = _conv_output_extent(size, spec.kernel_size, spec.stride, spec.kernel_size // 2)
        if size < 1:
            raise ConfigError(f"block {i} leaves no spatial extent",
                              details=f"kernel {spec.kernel_size}, stride {spec.stride}, input {input_size}")
        if spec.pool:
            if size < POOL_WINDOW:
                raise ConfigError(f"block {i}: pool window {POOL_WINDOW} does not fit {size}x{size}",
                                  details=f"input {input_size}")
            size = _conv_output_extent(size, POOL_WINDOW, POOL_WINDOW, 0)
        extents.append(size)
    return extents


class ConvBlock:
    """conv (padding k//2, no bias) -> normalization -> ReLU -> optional 2x2 average pool"""

    def __init__(self, in_channels: int, spec: ConvBlockSpec, rng: np.random.Generator, name: str):
        k = spec.kernel_size
        fan_in = in_channels * k * k
        self.spec = spec
        self.in_channels = in_channels
        self.name = name
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(spec.out_channels, in_channels, k, k)),
                                name=f"{name}.conv.weight")

    def conv(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, stride=self.spec.stride, padding=self.spec.kernel_size // 2)

    def finish(self, normalized: Tensor) -> Tensor:
        h = relu(normalized)
        if self.spec.pool:
            h = avg_pool2d(h, POOL_WINDOW)
        return h


class _Network:
    """Shared plumbing: parameters, buffers, state dicts, modes"""

    name = "network"

    def __init__(self, specs: Sequence[ConvBlockSpec], num_classes: int, in_channels: int, rng: np.random.Generator):
        self.specs = to_specs(specs)
        if num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {num_classes}")
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.blocks: List[ConvBlock] = []
        channels = in_channels
        for i, spec in enumerate(self.specs):
            self.blocks.append(ConvBlock(channels, spec, rng, name=f"blocks.{i}"))
            channels = spec.out_channels
        self.feature_channels = channels
        self.head_weight = Parameter(rng.normal(0.0, np.sqrt(1.0 / channels), size=(channels, num_classes)),
                                     name="head.weight")
        self.head_bias = Parameter(np.zeros(num_classes), name="head.bias")
        self.training = True

    def _head(self, h: Tensor) -> Tensor:
        return linear(global_avg_pool(h), self.head_weight, self.head_bias)

    def _check_input(self, x: Tensor):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"{self.name}: expected [N,{self.in_channels},H,W] input, got {x.shape}")

    def _norm_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        return iter(())

    def named_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        for block in self.blocks:
            yield block.weight.name, block.weight
        yield from self._norm_parameters()
        yield "head.weight", self.head_weight
        yield "head.bias", self.head_bias

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(())

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = OrderedDict()
        for name, param in self.named_parameters():
            state[name] = param.data.copy()
        for name, buf in self.named_buffers():
            state[name] = np.array(buf, copy=True)
        return state

    def _set_buffer(self, name: str, value: np.ndarray):
        raise CheckpointError(f"unknown buffer {name!r}")

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise CheckpointError("checkpoint entries do not match the model",
                                  details=f"missing={missing[:5]}, unexpected={unexpected[:5]}")
        params = dict(self.named_parameters())
        for name, value in state.items():
            if np.shape(value) != own[name].shape:
                raise CheckpointError(f"shape mismatch for {name}",
                                      details=f"checkpoint {np.shape(value)} vs model {own[name].shape}")
            if name in params:
                params[name].data = np.array(value, dtype=params[name].dtype, copy=True)
            else:
                self._set_buffer(name, np.array(value, copy=True))

    def zero_grad(self):
        for param in self.parameters():
            param.grad = None

    def train(self, mode: bool = True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    @property
    def frozen(self) -> bool:
        return assert_frozen(self)


class PlainModel(_Network):
    """Standard-BN network: substitute, undefended baseline and PGD-AT model"""

    def __init__(self, specs: Sequence[ConvBlockSpec], num_classes: int, in_channels: int = INPUT_SHAPE[0],
                 seed: int = 0, name: str = "plain"):
        self.name = name
        super().__init__(specs, num_classes, in_channels, np.random.default_rng(seed))
        self.norms = [BatchNormLayer(spec.out_channels, name=f"blocks.{i}.bn") for i, spec in enumerate(self.specs)]

    def _norm_parameters(self):
        for norm in self.norms:
            yield norm.gamma.name, norm.gamma
            yield norm.beta.name, norm.beta

    def named_buffers(self):
        for norm in self.norms:
            for key, value in norm.buffers().items():
                yield f"{norm.name}.{key}", value

    def _set_buffer(self, name: str, value: np.ndarray):
        for norm in self.norms:
            if name == f"{norm.name}.running_mean":
                norm.running_mean = value
                return
            if name == f"{norm.name}.running_var":
                norm.running_var = value
                return
        super()._set_buffer(name, value)

    def train(self, mode: bool = True):
        # a frozen network keeps using (and never updates) its running statistics
        self.training = mode and not self.frozen
        for norm in self.norms:
            norm.train(self.training)
        return self

    def features(self, x: Tensor) -> List[Tensor]:
        """Pre-BN convolution output of every block (z_s), no head"""
        self._check_input(x)
        feats = []
        with network_scope(self.name):
            h = x
            for block, norm in zip(self.blocks, self.norms):
                z = block.conv(h)
                feats.append(z)
                if len(feats) < len(self.blocks):
                    h = block.finish(norm(z))
        return feats

    def __call__(self, x: Tensor) -> Tensor:
        self._check_input(x)
        with network_scope(self.name):
            h = x
            for block, norm in zip(self.blocks, self.norms):
                h = block.finish(norm(block.conv(h)))
            return self._head(h)


class SubstituteModel(PlainModel):
    """Pre-trained on a disjoint task, then frozen; supplies z_s per block"""

    def __init__(self, specs, num_classes, in_channels: int = INPUT_SHAPE[0], seed: int = 0):
        super().__init__(specs, num_classes, in_channels=in_channels, seed=seed, name="substitute")


class TargetModel(_Network):
    """Conv blocks each followed by an adaptive BN layer fed from the substitute"""

    name = "target"

    def __init__(self, specs: Sequence[ConvBlockSpec], num_classes: int, substitute_channels: Sequence[int],
                 in_channels: int = INPUT_SHAPE[0], seed: int = 0):
        rng = np.random.default_rng(seed)
        super().__init__(specs, num_classes, in_channels, rng)
        if len(substitute_channels) != len(self.specs):
            raise BlockMapError("one substitute channel count per target block is required",
                                details=f"{len(substitute_channels)} given for {len(self.specs)} blocks")
        self.adaptive = [
            AdaptiveBNLayer(AdaINEncoder(c_s, spec.out_channels, eps=NORM["eps"], rng=rng,
                                         name=f"blocks.{i}.adabn.encoder"))
            for i, (spec, c_s) in enumerate(zip(self.specs, substitute_channels))
        ]

    def _norm_parameters(self):
        for layer in self.adaptive:
            for param in layer.parameters():
                yield param.name, param

    def set_stat_source(self, source: str):
        for layer in self.adaptive:
            layer.stat_source = source

    def __call__(self, x: Tensor, substitute_features: Sequence[Tensor], detach_substitute: bool = True) -> Tensor:
        self._check_input(x)
        if len(substitute_features) != len(self.blocks):
            raise BlockMapError("substitute features do not match target blocks",
                                details=f"{len(substitute_features)} features for {len(self.blocks)} blocks")
        with network_scope(self.name):
            h = x
            for block, layer, z_s in zip(self.blocks, self.adaptive, substitute_features):
                h = block.finish(layer(block.conv(h), z_s, detach_substitute=detach_substitute))
            return self._head(h)

    def to_plain_bn(self) -> PlainModel:
        """Standard-BN model sharing this target's convolution and head parameters"""
        plain = PlainModel(self.specs, self.num_classes, in_channels=self.in_channels, name="plain")
        for mine, theirs in zip(self.blocks, plain.blocks):
            theirs.weight = mine.weight
        plain.head_weight = self.head_weight
        plain.head_bias = self.head_bias
        return plain


def match_blocks(n_substitute: int, n_target: int) -> List[int]:
    """Pair target block t with substitute block block_map[t], subsampling uniformly"""
    if n_target < 1:
        raise BlockMapError("target needs at least one block")
    if n_substitute < n_target:
        raise BlockMapError("substitute has fewer blocks than the target",
                            details=f"{n_substitute} substitute vs {n_target} target blocks")
    return [int(round(v)) for v in np.linspace(0, n_substitute - 1, n_target)]


def build_substitute(specs, num_classes: int, in_channels: int = INPUT_SHAPE[0], seed: int = 0) -> SubstituteModel:
    return SubstituteModel(to_specs(specs), num_classes, in_channels=in_channels, seed=seed)


def build_plain(specs, num_classes: int, in_channels: int = INPUT_SHAPE[0], seed: int = 0) -> PlainModel:
    return PlainModel(to_specs(specs), num_classes, in_channels=in_channels, seed=seed)


def build_target(specs, num_classes: int, substitute_specs=None, in_channels: int = INPUT_SHAPE[0],
                 seed: int = 0) -> TargetModel:
    specs = to_specs(specs)
    substitute_specs = to_specs(substitute_specs) if substitute_specs is not None else specs
    block_map = match_blocks(len(substitute_specs), len(specs))
    substitute_channels = [substitute_specs[s].out_channels for s in block_map]
    return TargetModel(specs, num_classes, substitute_channels, in_channels=in_channels, seed=seed)


class ABNNModel:
    """Frozen substitute + trainable target with per-block statistic routing"""

    def __init__(self, target: TargetModel, substitute: PlainModel, block_map: Optional[List[int]] = None,
                 attack_mode: str = "composite"):
        if block_map is None:
            block_map = match_blocks(len(substitute.blocks), len(target.blocks))
        if len(block_map) != len(target.blocks):
            raise BlockMapError("block_map must cover every target block",
                                details=f"{len(block_map)} entries for {len(target.blocks)} blocks")
        if len(set(block_map)) != len(block_map) or not all(0 <= s < len(substitute.blocks) for s in block_map):
            raise BlockMapError("block_map must pair each target block with a distinct substitute block",
                                details=f"block_map={block_map}")
        for t, s in enumerate(block_map):
            expected = target.adaptive[t].encoder.substitute_channels
            if substitute.specs[s].out_channels != expected:
                raise BlockMapError(f"target block {t} expects {expected} substitute channels",
                                    details=f"substitute block {s} has {substitute.specs[s].out_channels}")
        if attack_mode not in ATTACK_MODES:
            raise ConfigError(f"attack_mode must be one of {ATTACK_MODES}")
        self.target = target
        self.substitute = substitute
        self.block_map = list(block_map)
        self.attack_mode = attack_mode
        self.training = True

    @property
    def num_classes(self) -> int:
        return self.target.num_classes

    def named_parameters(self):
        for name, param in self.target.named_parameters():
            yield f"target.{name}", param

    def parameters(self) -> List[Parameter]:
        """Trainable side only (target blocks, encoders and head)"""
        return self.target.parameters()

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = OrderedDict()
        for prefix, net in (("target", self.target), ("substitute", self.substitute)):
            for name, value in net.state_dict().items():
                state[f"{prefix}.{name}"] = value
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        for prefix, net in (("target", self.target), ("substitute", self.substitute)):
            head = prefix + "."
            net.load_state_dict({k[len(head):]: v for k, v in state.items() if k.startswith(head)})

    def zero_grad(self):
        self.target.zero_grad()

    def train(self, mode: bool = True):
        self.training = mode
        self.target.train(mode)
        if not self.substitute.frozen:
            self.substitute.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, x: Tensor) -> Tensor:
        return abnn_forward(self, x)

    def block_features(self, x: np.ndarray) -> Tuple[List[Tensor], List[Tensor]]:
        """Pre-normalization features of the paired blocks: (target z_t, substitute z_s)"""
        with no_grad():
            x = Tensor(x)
            features = self.substitute.features(x)
            routed = [features[s] for s in self.block_map]
            target_features = []
            h = x
            for block, layer, z_s in zip(self.target.blocks, self.target.adaptive, routed):
                z = block.conv(h)
                target_features.append(z)
                h = block.finish(layer(z, z_s))
        return target_features, routed


def abnn_forward(model: ABNNModel, x: Tensor) -> Tensor:
    """
    Substitute first (cached z_s per block), then the target with each
    adaptive BN layer consuming its mapped block's z_s. In composite attack
    mode an input that requires grad is also differentiated through the
    substitute path; otherwise the substitute runs without a graph.
    """
    if x.ndim != 4 or x.shape[1] != model.target.in_channels or x.shape[1] != model.substitute.in_channels:
        raise ShapeError(f"ABNN input must be [N,{model.target.in_channels},H,W], got {x.shape}")
    through_substitute = model.attack_mode == "composite" and x.requires_grad and is_grad_enabled()
    if through_substitute:
        features = model.substitute.features(x)
    else:
        with no_grad():
            features = model.substitute.features(x)
    routed = [features[s] for s in model.block_map]
    return model.target(x, routed, detach_substitute=not through_substitute)


def freeze(model):
    """Mark every parameter frozen; a frozen standard-BN model stays in eval mode"""
    for param in model.parameters():
        param.frozen = True
    model.eval()
    logger.info("✓ %s frozen (%d parameters)", getattr(model, "name", type(model).__name__), len(model.parameters()))


def assert_frozen(model) -> bool:
    params = model.parameters()
    return bool(params) and all(p.frozen for p in params)


@contextlib.contextmanager
def evaluating(model):
    """Switch to eval mode for the duration of the block and restore the previous mode"""
    was_training = model.training
    model.eval()
    try:
        yield model
    finally:
        model.train(was_training)


def parameter_count(specs, num_classes: int, in_channels: int = INPUT_SHAPE[0], norm: str = "batch",
                    substitute_channels: Optional[Sequence[int]] = None) -> int:
    """Closed-form trainable parameter count of a backbone"""
    specs = to_specs(specs)
    total, channels = 0, in_channels
    for i, spec in enumerate(specs):
        total += spec.out_channels * channels * spec.kernel_size ** 2
        if norm == "batch":
            total += 2 * spec.out_channels
        elif norm == "adaptive":
            c_s = substitute_channels[i] if substitute_channels is not None else spec.out_channels
            total += 2 * c_s * 4 * spec.out_channels + 4 * spec.out_channels
        channels = spec.out_channels
    return total + channels * num_classes + num_classes


def count_parameters(model) -> int:
    return int(sum(p.size for p in model.parameters()))


def parameter_digest(model) -> str:
    """SHA-256 over names, shapes, dtypes and bytes of parameters and buffers"""
    digest = hashlib.sha256()
    for name, value in model.state_dict().items():
        value = np.ascontiguousarray(value)
        digest.update(name.encode("utf-8"))
        digest.update(str(value.shape).encode("utf-8"))
        digest.update(str(value.dtype).encode("utf-8"))
        digest.update(value.tobytes())
    return digest.hexdigest()


def predict(model, x: Union[np.ndarray, Tensor]) -> np.ndarray:
    with no_grad():
        logits = model(x if isinstance(x, Tensor) else Tensor(x))
    return np.argmax(logits.data, axis=1)
