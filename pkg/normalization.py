# normalization.py - Batch normalization, AdaIN encoding and the adaptive BN layer

import logging
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from defaults import NORM
from error_handler import ConfigError, ShapeError, EmptyTensorError
from tensor import Tensor, Parameter, concat, linear

logger = logging.getLogger(__name__)

STAT_SOURCES = ("substitute", "target")


@dataclass
class BNStats:
    """Per-channel mean and standard deviation (sigma = sqrt(var + eps))"""
    mu: Tensor
    sigma: Tensor
    eps: float = NORM["eps"]

    def as_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.mu.data.copy(), self.sigma.data.copy()


def _stat_axes(z: Tensor) -> Tuple[int, ...]:
    if z.ndim == 4:
        return (0, 2, 3)
    if z.ndim == 2:
        return (0,)
    raise ShapeError(f"expected a [N,C,H,W] or [N,C] feature, got shape {z.shape}")


def channel_view(values: Tensor, ndim: int) -> Tensor:
    """Reshape a per-channel vector so it scales/shifts a [N,C,...] feature"""
    return values.reshape((1, values.shape[0]) + (1,) * (ndim - 2))


def compute_bn_stats(z: Tensor, eps: float = NORM["eps"]) -> BNStats:
    """
    Batch statistics of z over batch and spatial positions. Variance is the
    population (biased) estimate.
    """
    axes = _stat_axes(z)
    count = int(np.prod([z.shape[a] for a in axes]))
    if count == 0 or z.size == 0:
        raise EmptyTensorError("cannot compute BN statistics of an empty tensor", details=f"shape {z.shape}")
    mu = z.mean(axis=axes)
    centered = z - channel_view(mu, z.ndim)
    var = (centered * centered).mean(axis=axes)
    sigma = (var + eps).sqrt()
    return BNStats(mu=mu, sigma=sigma, eps=eps)


class BatchNormLayer:
    """
    Standard BN: z' = gamma * (z - mu(z)) / sigma(z) + beta. Train mode uses
    batch statistics and updates the running estimate; eval mode uses the
    running estimate and mutates nothing.
    """

    def __init__(self, channels: int, eps: float = NORM["eps"], momentum: float = NORM["momentum"], name: str = "bn"):
        if not 0.0 < momentum < 1.0:
            raise ConfigError(f"momentum must lie in (0, 1), got {momentum}")
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.name = name
        self.gamma = Parameter(np.ones(channels), name=f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels), name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=self.gamma.dtype)
        self.running_var = np.ones(channels, dtype=self.gamma.dtype)
        self.training = True

    @property
    def running_stats(self) -> BNStats:
        sigma = np.sqrt(self.running_var + self.eps)
        return BNStats(mu=Tensor(self.running_mean), sigma=Tensor(sigma), eps=self.eps)

    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    def train(self, mode: bool = True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def parameters(self) -> List[Parameter]:
        return [self.gamma, self.beta]

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, z: Tensor) -> Tensor:
        return batch_norm_forward(z, self)


def batch_norm_forward(z: Tensor, layer: BatchNormLayer) -> Tensor:
    if z.ndim < 2 or z.shape[1] != layer.channels:
        raise ShapeError(
            f"{layer.name}: expected {layer.channels} channels, got shape {z.shape}",
        )
    if layer.training:
        stats = compute_bn_stats(z, layer.eps)
        m = layer.momentum
        layer.running_mean = (1.0 - m) * layer.running_mean + m * stats.mu.data
        layer.running_var = (1.0 - m) * layer.running_var + m * (stats.sigma.data ** 2 - layer.eps)
    else:
        stats = layer.running_stats

    normalized = (z - channel_view(stats.mu, z.ndim)) / channel_view(stats.sigma, z.ndim)
    return channel_view(layer.gamma, z.ndim) * normalized + channel_view(layer.beta, z.ndim)


def _inverse_softplus(y: np.ndarray) -> np.ndarray:
    return np.log(np.expm1(y))


class AdaINEncoder:
    """
    Affine map from substitute statistics [mu(z_s) || sigma(z_s)] (length
    2*C_s) to 4*C_t values: mapped mu_s, mapped sigma_s (softplus + eps),
    gamma_s and beta_s, one of each per target channel.
    """

    def __init__(self, substitute_channels: int, target_channels: int, eps: float = NORM["eps"],
                 init_scale: float = NORM["encoder_init_scale"], rng: np.random.Generator = None,
                 name: str = "encoder"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.substitute_channels = substitute_channels
        self.target_channels = target_channels
        self.eps = eps
        self.name = name
        weight = rng.uniform(-init_scale, init_scale, size=(2 * substitute_channels, 4 * target_channels))
        self.weight = Parameter(weight, name=f"{name}.weight")
        self.bias = Parameter(self._bias_for(np.zeros(target_channels), np.ones(target_channels),
                                             np.ones(target_channels), np.zeros(target_channels)),
                              name=f"{name}.bias")

    @property
    def output_size(self) -> int:
        return 4 * self.target_channels

    def _bias_for(self, mu, sigma, gamma, beta) -> np.ndarray:
        c = self.target_channels
        parts = [np.broadcast_to(np.asarray(v, dtype=float), (c,)) for v in (mu, sigma, gamma, beta)]
        if np.any(parts[1] <= self.eps):
            raise ConfigError("mapped sigma must exceed eps")
        parts[1] = _inverse_softplus(parts[1] - self.eps)
        return np.concatenate(parts)

    def set_constant(self, mu=0.0, sigma=1.0, gamma=1.0, beta=0.0):
        """Force constant outputs regardless of z_s (weight zero, bias chosen)"""
        self.weight.data[...] = 0.0
        self.bias.data[...] = self._bias_for(mu, sigma, gamma, beta)

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]

    def encode(self, z_s: Tensor, detach_substitute: bool = True) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
        if z_s.ndim < 2 or z_s.shape[1] != self.substitute_channels:
            raise ShapeError(
                f"{self.name}: expected {self.substitute_channels} substitute channels, got shape {z_s.shape}",
            )
        if detach_substitute:
            z_s = z_s.detach()
        stats = compute_bn_stats(z_s, self.eps)
        features = concat([stats.mu, stats.sigma]).reshape(1, 2 * self.substitute_channels)
        out = linear(features, self.weight, self.bias).reshape(self.output_size)
        c = self.target_channels
        mapped_mu = out[0:c]
        mapped_sigma = out[c:2 * c].softplus() + self.eps
        return mapped_mu, mapped_sigma, out[2 * c:3 * c], out[3 * c:4 * c]


def adain_encode(z_s: Tensor, encoder: AdaINEncoder, detach_substitute: bool = True) -> Tuple[Tensor, Tensor]:
    """{gamma_s, beta_s} = AdaIN(z_s), one value per target channel"""
    _, _, gamma_s, beta_s = encoder.encode(z_s, detach_substitute=detach_substitute)
    return gamma_s, beta_s


class AdaptiveBNLayer:
    """Normalizes target features with statistics routed from the substitute"""

    def __init__(self, encoder: AdaINEncoder, eps: float = NORM["eps"], stat_source: str = "substitute"):
        if stat_source not in STAT_SOURCES:
            raise ConfigError(f"stat_source must be one of {STAT_SOURCES}")
        self.encoder = encoder
        self.eps = eps
        self.stat_source = stat_source

    @property
    def channels(self) -> int:
        return self.encoder.target_channels

    def parameters(self) -> List[Parameter]:
        return self.encoder.parameters()

    def __call__(self, z_t: Tensor, z_s: Tensor, detach_substitute: bool = True) -> Tensor:
        return adaptive_bn_forward(z_t, z_s, self, detach_substitute=detach_substitute)


def adaptive_bn_forward(z_t: Tensor, z_s: Tensor, layer: AdaptiveBNLayer, detach_substitute: bool = True) -> Tensor:
    """
    z'_t = gamma_s * (sigma_s * (z_t - mu(z_t)) / sigma(z_t) + mu_s) + beta_s,
    with (mu_s, sigma_s) the encoder-mapped substitute statistics.
    """
    if z_t.ndim < 2 or z_t.shape[1] != layer.channels:
        raise ShapeError(f"adaptive BN: expected {layer.channels} target channels, got shape {z_t.shape}")
    target_stats = compute_bn_stats(z_t, layer.eps)
    mapped_mu, mapped_sigma, gamma_s, beta_s = layer.encoder.encode(z_s, detach_substitute=detach_substitute)
    if layer.stat_source == "target":
        mapped_mu, mapped_sigma = target_stats.mu, target_stats.sigma

    nd = z_t.ndim
    normalized = (z_t - channel_view(target_stats.mu, nd)) / channel_view(target_stats.sigma, nd)
    realigned = channel_view(mapped_sigma, nd) * normalized + channel_view(mapped_mu, nd)
    return channel_view(gamma_s, nd) * realigned + channel_view(beta_s, nd)


def bn_stats_shift(clean: Tensor, perturbed: Tensor, eps: float = NORM["eps"]) -> Dict[str, float]:
    """Mean absolute change of per-channel mean/std between two features"""
    clean_mu, clean_sigma = compute_bn_stats(clean.detach(), eps).as_arrays()
    adv_mu, adv_sigma = compute_bn_stats(perturbed.detach(), eps).as_arrays()
    return {
        "mean_shift": float(np.mean(np.abs(clean_mu - adv_mu))),
        "std_shift": float(np.mean(np.abs(clean_sigma - adv_sigma))),
    }
