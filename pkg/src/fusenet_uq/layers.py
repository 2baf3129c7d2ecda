"""Layers and blocks composed by the model zoo.

All layers take an explicit ``mode``:

``train``
    dropout active, batchnorm uses batch statistics and updates running stats.
``mc_inference``
    dropout active, batchnorm uses running statistics (one stochastic
    forward pass of Monte Carlo dropout).
``deterministic``
    dropout off, batchnorm uses running statistics.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from fusenet_uq import tensor as T
from fusenet_uq.rng import Generator, box_muller
from fusenet_uq.tensor import BatchNormStats, ShapeError, Tensor

MODES = ("train", "mc_inference", "deterministic")


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return mode


def dropout_active(mode: str) -> bool:
    return check_mode(mode) != "deterministic"


def bn_mode(mode: str) -> str:
    return "train" if check_mode(mode) == "train" else "eval"


class Module:
    """Minimal parameter container: parameters and buffers are discovered from attributes."""

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{key}.{i}", item
            else:
                yield key, value

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + key] = value
            elif isinstance(value, Module):
                out.update(value.parameters(f"{prefix}{key}."))
        return out

    def buffers(self, prefix: str = "") -> dict[str, BatchNormStats]:
        out: dict[str, BatchNormStats] = {}
        for key, value in self._children():
            if isinstance(value, BatchNormStats):
                out[prefix + key] = value
            elif isinstance(value, Module):
                out.update(value.buffers(f"{prefix}{key}."))
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())


def _normal(rng: Generator, shape, std: float, dtype) -> np.ndarray:
    return (box_muller(rng, int(np.prod(shape))) * std).reshape(shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: Generator, dtype=T.DEFAULT_DTYPE):
        if kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {kernel}")
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(_normal(rng, (out_channels, in_channels, kernel, kernel), np.sqrt(2.0 / fan_in), dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=T.DEFAULT_DTYPE):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.stats = BatchNormStats.fresh(channels, dtype)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return T.batchnorm(x, self.gamma, self.beta, self.stats, bn_mode(mode))


def mc_dropout(x: Tensor, rate: float, rng: Optional[Generator], active: bool) -> Tensor:
    """Inverted dropout: zero each element with probability ``rate`` and rescale survivors.

    When ``active`` the mask is drawn from ``rng``; at inference this is the
    per-pass stochastic weight mask of Monte Carlo dropout.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not active or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("active dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    scale = np.asarray(keep, dtype=x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return T.mul(x, Tensor(scale))


class McDropout(Module):
    """Dropout that stays on at inference (``always_active``) unless the mode is deterministic."""

    def __init__(self, rate: float, always_active: bool = True):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.always_active = always_active

    def __call__(self, x: Tensor, mode: str, rng: Optional[Generator]) -> Tensor:
        active = mode == "train" or (self.always_active and dropout_active(mode))
        return mc_dropout(x, self.rate, rng, active)


@dataclass(frozen=True)
class ConvBlockSpec:
    out_channels: int
    kernel: int = 3
    has_dropout: bool = False
    dropout_rate: float = 0.0
    n_convs: int = 2

    def __post_init__(self):
        if self.out_channels < 1:
            raise ValueError("out_channels must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be a positive odd int, got {self.kernel}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.has_dropout != (self.dropout_rate > 0):
            raise ValueError("dropout_rate > 0 iff has_dropout")
        if self.n_convs < 1:
            raise ValueError("n_convs must be >= 1")

    def without_dropout(self) -> "ConvBlockSpec":
        return ConvBlockSpec(self.out_channels, self.kernel, False, 0.0, self.n_convs)


class ConvBlock(Module):
    """conv-ReLU (x n_convs) -> batchnorm -> maxpool(2) -> optional MC dropout."""

    def __init__(self, in_channels: int, spec: ConvBlockSpec, rng: Generator, dtype=T.DEFAULT_DTYPE):
        self.spec = spec
        chans = [in_channels] + [spec.out_channels] * spec.n_convs
        self.convs = [Conv2d(a, b, spec.kernel, rng, dtype) for a, b in zip(chans, chans[1:])]
        self.bn = BatchNorm2d(spec.out_channels, dtype)
        self.dropout = McDropout(spec.dropout_rate) if spec.has_dropout else None

    def __call__(self, x: Tensor, mode: str, rng: Optional[Generator] = None) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"conv block input needs even spatial dims, got {x.shape}")
        for conv in self.convs:
            x = T.relu(conv(x))
        x = T.maxpool2d(self.bn(x, mode), 2, 2)
        if self.dropout is not None:
            x = self.dropout(x, mode, rng)
        return x


def conv_block(x: Tensor, block: ConvBlock, mode: str, rng: Optional[Generator] = None) -> Tensor:
    return block(x, mode, rng)


global_average_pool = T.global_average_pool


ACTIVATIONS = ("relu", "softmax", "none")


def dense(x: Tensor, weight: Tensor, bias: Tensor, activation: str = "none") -> Tensor:
    if activation not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense input {x.shape} does not match weight {weight.shape}")
    y = T.add(T.matmul(x, weight), bias)
    if activation == "relu":
        return T.relu(y)
    if activation == "softmax":
        return T.softmax(y)
    return y


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: Generator, activation: str = "none", dtype=T.DEFAULT_DTYPE):
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        std = np.sqrt(2.0 / in_features) if activation == "relu" else np.sqrt(1.0 / in_features)
        self.weight = Tensor(_normal(rng, (in_features, out_features), std, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self.weight, self.bias, self.activation)


class DenseHead(Module):
    """Hidden ReLU layers, each followed by MC dropout, then a linear output layer (logits)."""

    def __init__(self, in_features: int, widths, dropout_rates, rng: Generator, dtype=T.DEFAULT_DTYPE):
        widths = list(widths)
        rates = list(dropout_rates)
        if len(rates) != len(widths) - 1:
            raise ValueError("need one dropout rate per hidden dense layer")
        sizes = [in_features] + widths
        self.hidden = [Dense(a, b, rng, "relu", dtype) for a, b in zip(sizes[:-2], sizes[1:-1])]
        self.drops = [McDropout(r) for r in rates]
        self.out = Dense(sizes[-2], sizes[-1], rng, "none", dtype)

    def __call__(self, x: Tensor, mode: str, rng: Optional[Generator]) -> Tensor:
        for layer, drop in zip(self.hidden, self.drops):
            x = drop(layer(x), mode, rng)
        return self.out(x)
