"""The three architectures: Simple CNN, Multi-headed CNN and the fusion network.

The fusion network concatenates pooled taps of its 3rd, 4th and 5th
convolutional blocks with the pooled output of a second, shallower
convolutional backbone, then classifies the fused vector with a
512/128/64 dense head under heavy MC dropout (0.7/0.5/0.3).

All models return softmax probabilities from :meth:`Model.forward` and raw
logits from :meth:`Model.logits` (the trainer uses the latter with a fused
log-softmax loss).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from fusenet_uq import tensor as T
from fusenet_uq.layers import (
    ConvBlock,
    ConvBlockSpec,
    DenseHead,
    McDropout,
    Module,
    check_mode,
    global_average_pool,
)
from fusenet_uq.rng import Generator, stream
from fusenet_uq.tensor import ShapeError, Tensor

KINDS = ("simple_cnn", "multi_headed_cnn", "fusenet")
FUSION_ORDER = ("conv3", "conv4", "conv5", "backbone")


class SpecError(ValueError):
    """Invalid ModelSpec."""


def _fusenet_blocks() -> list[ConvBlockSpec]:
    plan = [(16, 0.0), (32, 0.0), (64, 0.0), (128, 0.2), (128, 0.2)]
    return [ConvBlockSpec(c, 3, r > 0, r, 2) for c, r in plan]


def _shallow_blocks() -> list[ConvBlockSpec]:
    return [ConvBlockSpec(c, 3, False, 0.0, 1) for c in (16, 32, 64)]


@dataclass
class ModelSpec:
    kind: str
    input_shape: tuple = (1, 64, 64)
    num_classes: int = 3
    block_specs: list = field(default_factory=list)
    dense_widths: list = field(default_factory=lambda: [512, 128, 64, 3])
    head_dropout_rates: list = field(default_factory=lambda: [0.7, 0.5, 0.3])
    fusion_sources: list = field(default_factory=list)
    feature_dropout: float = 0.2
    head_kernels: list = field(default_factory=lambda: [3, 5, 7])
    backbone_channels: list = field(default_factory=lambda: [32, 64, 128])

    @classmethod
    def default(cls, kind: str, input_shape=(1, 64, 64), num_classes: int = 3) -> "ModelSpec":
        if kind not in KINDS:
            raise SpecError(f"unknown model kind {kind!r}; expected one of {KINDS}")
        blocks = _fusenet_blocks() if kind == "fusenet" else _shallow_blocks()
        spec = cls(
            kind=kind,
            input_shape=tuple(input_shape),
            num_classes=num_classes,
            block_specs=blocks,
            dense_widths=[512, 128, 64, num_classes],
            fusion_sources=list(FUSION_ORDER) if kind == "fusenet" else [],
        )
        spec.validate()
        return spec

    def validate(self) -> "ModelSpec":
        if self.kind not in KINDS:
            raise SpecError(f"unknown model kind {self.kind!r}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input_shape must be [C, H, W], got {self.input_shape}")
        if self.num_classes < 2:
            raise SpecError("num_classes must be >= 2")
        if not self.dense_widths or self.dense_widths[-1] != self.num_classes:
            raise SpecError("last dense width must equal num_classes")
        if len(self.head_dropout_rates) != len(self.dense_widths) - 1:
            raise SpecError("need one head dropout rate per hidden dense layer")
        rates = list(self.head_dropout_rates) + [self.feature_dropout]
        if any(not 0.0 <= r < 1.0 for r in rates):
            raise SpecError("dropout rates must lie in [0, 1)")
        if not self.block_specs:
            raise SpecError("block_specs must be non-empty")
        depth = len(self.block_specs)
        if self.kind == "fusenet":
            if depth != 5:
                raise SpecError("fusenet needs exactly five conv blocks")
            if not self.fusion_sources:
                raise SpecError("fusenet needs at least one fusion source")
            unknown = set(self.fusion_sources) - set(FUSION_ORDER)
            if unknown:
                raise SpecError(f"unknown fusion sources {sorted(unknown)}")
            depth = max(depth, len(self.backbone_channels))
        if self.kind == "multi_headed_cnn" and len(self.head_kernels) < 1:
            raise SpecError("multi_headed_cnn needs at least one head")
        _, h, w = self.input_shape
        if h % (2 ** depth) or w % (2 ** depth):
            raise SpecError(f"input {h}x{w} must be divisible by 2**{depth}")
        return self

    def without_dropout(self) -> "ModelSpec":
        """Same architecture with every dropout rate forced to 0."""
        return dataclasses.replace(
            self,
            block_specs=[b.without_dropout() for b in self.block_specs],
            head_dropout_rates=[0.0] * len(self.head_dropout_rates),
            feature_dropout=0.0,
        )

    def dropout_disabled(self) -> bool:
        rates = [b.dropout_rate for b in self.block_specs] + list(self.head_dropout_rates)
        if self.kind != "fusenet":
            rates.append(self.feature_dropout)
        return all(r == 0 for r in rates)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - names
        if extra:
            raise SpecError(f"unknown model spec keys {sorted(extra)}")
        d["input_shape"] = tuple(d.get("input_shape", (1, 64, 64)))
        d["block_specs"] = [b if isinstance(b, ConvBlockSpec) else ConvBlockSpec(**b) for b in d.get("block_specs", [])]
        return cls(**d).validate()


@dataclass
class FusedFeatureVector:
    segments: list  # (source name, length), in concatenation order
    data: Tensor

    @property
    def width(self) -> int:
        return sum(n for _, n in self.segments)

    def segment(self, key) -> np.ndarray:
        """Slice one source back out of the fused buffer (by name or position)."""
        names = [s for s, _ in self.segments]
        i = names.index(key) if isinstance(key, str) else int(key)
        start = sum(n for _, n in self.segments[:i])
        return self.data.data[:, start:start + self.segments[i][1]]


def fuse_features(sources: Sequence[Tensor], names: Optional[Sequence[str]] = None) -> FusedFeatureVector:
    """Concatenate ``[B, p_i]`` feature vectors along the feature axis."""
    if not sources:
        raise ShapeError("fuse_features needs at least one source")
    names = list(names) if names is not None else [f"source{i}" for i in range(len(sources))]
    if len(names) != len(sources):
        raise ShapeError("one name per source required")
    batch = sources[0].shape[0]
    for name, s in zip(names, sources):
        if s.ndim != 2:
            raise ShapeError(f"source {name} must be [B, p], got {s.shape}")
        if s.shape[0] != batch:
            raise ShapeError(f"batch mismatch: source {name} has {s.shape[0]} rows, expected {batch}")
    data = sources[0] if len(sources) == 1 else T.concat(list(sources), axis=1)
    return FusedFeatureVector([(n, s.shape[1]) for n, s in zip(names, sources)], data)


class Model(Module):
    spec: ModelSpec

    def logits(self, x: Tensor, mode: str, rng: Optional[Generator] = None) -> Tensor:
        raise NotImplementedError

    def forward(self, x: Tensor, mode: str = "deterministic", rng: Optional[Generator] = None) -> Tensor:
        return T.softmax(self.logits(x, mode, rng))

    __call__ = forward

    def _check_input(self, x: Tensor, mode: str):
        check_mode(mode)
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ShapeError(f"expected batch of shape [B, {', '.join(map(str, self.spec.input_shape))}], got {x.shape}")


class SimpleCNN(Model):
    """Three single-conv blocks, MC dropout, flatten, dense head."""

    def __init__(self, spec: ModelSpec, rng: Generator, dtype=T.DEFAULT_DTYPE):
        self._spec = spec
        c, h, w = spec.input_shape
        chans = [c] + [b.out_channels for b in spec.block_specs]
        self.blocks = [ConvBlock(a, b, rng, dtype) for a, b in zip(chans, spec.block_specs)]
        self.dropout = McDropout(spec.feature_dropout)
        scale = 2 ** len(spec.block_specs)
        flat = chans[-1] * (h // scale) * (w // scale)
        self.head = DenseHead(flat, spec.dense_widths, spec.head_dropout_rates, rng, dtype)

    @property
    def spec(self):
        return self._spec

    def logits(self, x, mode, rng=None):
        self._check_input(x, mode)
        for block in self.blocks:
            x = block(x, mode, rng)
        x = self.dropout(x, mode, rng)
        x = T.reshape(x, (x.shape[0], -1))
        return self.head(x, mode, rng)


class MultiHeadedCNN(Model):
    """Parallel conv heads with different kernel sizes, pooled and fused."""

    def __init__(self, spec: ModelSpec, rng: Generator, dtype=T.DEFAULT_DTYPE):
        self._spec = spec
        c = spec.input_shape[0]
        self.heads = []
        for k in spec.head_kernels:
            plan = [dataclasses.replace(b, kernel=k) for b in spec.block_specs]
            chans = [c] + [b.out_channels for b in plan]
            self.heads.append(_Stack([ConvBlock(a, b, rng, dtype) for a, b in zip(chans, plan)]))
        self.dropout = McDropout(spec.feature_dropout)
        width = spec.block_specs[-1].out_channels * len(spec.head_kernels)
        self.head = DenseHead(width, spec.dense_widths, spec.head_dropout_rates, rng, dtype)

    @property
    def spec(self):
        return self._spec

    def features(self, x, mode, rng=None) -> FusedFeatureVector:
        pooled = []
        for stack in self.heads:
            h = x
            for block in stack.blocks:
                h = block(h, mode, rng)
            pooled.append(global_average_pool(self.dropout(h, mode, rng)))
        return fuse_features(pooled, [f"head{k}" for k in self.spec.head_kernels])

    def logits(self, x, mode, rng=None):
        self._check_input(x, mode)
        return self.head(self.features(x, mode, rng).data, mode, rng)


class FuseNet(Model):
    """Hierarchical feature-fusion network (two branches, fused taps, dense head)."""

    def __init__(self, spec: ModelSpec, rng: Generator, dtype=T.DEFAULT_DTYPE):
        self._spec = spec
        c = spec.input_shape[0]
        chans = [c] + [b.out_channels for b in spec.block_specs]
        self.blocks = [ConvBlock(a, b, rng, dtype) for a, b in zip(chans, spec.block_specs)]
        # surrogate for a pretrained VGG16: shallow conv stack trained jointly
        bchans = [c] + list(spec.backbone_channels)
        self.backbone = [ConvBlock(a, ConvBlockSpec(b, 3, False, 0.0, 1), rng, dtype) for a, b in zip(bchans, bchans[1:])]
        widths = {"conv3": chans[3], "conv4": chans[4], "conv5": chans[5], "backbone": bchans[-1]}
        self._sources = [s for s in FUSION_ORDER if s in spec.fusion_sources]
        self.head = DenseHead(sum(widths[s] for s in self._sources), spec.dense_widths, spec.head_dropout_rates, rng, dtype)

    @property
    def spec(self):
        return self._spec

    def features(self, x, mode, rng=None) -> FusedFeatureVector:
        taps = {}
        h = x
        for i, block in enumerate(self.blocks, start=1):
            h = block(h, mode, rng)
            taps[f"conv{i}"] = h
        b = x
        for block in self.backbone:
            b = block(b, mode, rng)
        taps["backbone"] = b
        return fuse_features([global_average_pool(taps[s]) for s in self._sources], self._sources)

    def logits(self, x, mode, rng=None):
        self._check_input(x, mode)
        return self.head(self.features(x, mode, rng).data, mode, rng)


class _Stack(Module):
    def __init__(self, blocks):
        self.blocks = blocks


_BUILDERS = {"simple_cnn": SimpleCNN, "multi_headed_cnn": MultiHeadedCNN, "fusenet": FuseNet}


def _build(kind: str, spec: ModelSpec, seed: int, dtype) -> Model:
    if spec.kind != kind:
        raise SpecError(f"expected a {kind} spec, got {spec.kind}")
    spec.validate()
    return _BUILDERS[kind](spec, stream(seed, 0), dtype)


def build_simple_cnn(spec: ModelSpec, seed: int = 0, dtype=T.DEFAULT_DTYPE) -> SimpleCNN:
    return _build("simple_cnn", spec, seed, dtype)


def build_multi_headed_cnn(spec: ModelSpec, seed: int = 0, dtype=T.DEFAULT_DTYPE) -> MultiHeadedCNN:
    return _build("multi_headed_cnn", spec, seed, dtype)


def build_fusenet(spec: ModelSpec, seed: int = 0, dtype=T.DEFAULT_DTYPE) -> FuseNet:
    return _build("fusenet", spec, seed, dtype)


def build_model(spec: ModelSpec, seed: int = 0, dtype=T.DEFAULT_DTYPE) -> Model:
    if spec.kind not in _BUILDERS:
        raise SpecError(f"unknown model kind {spec.kind!r}")
    return _build(spec.kind, spec, seed, dtype)


def forward(model: Model, batch, mode: str = "deterministic", rng: Optional[Generator] = None) -> Tensor:
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch), dtype=next(iter(model.parameters().values())).dtype)
    return model.forward(x, mode, rng)


def predict_proba(
    model: Model,
    x: np.ndarray,
    mode: str = "deterministic",
    rng: Optional[Generator] = None,
    batch_size: int = 100,
) -> np.ndarray:
    """Softmax outputs for ``x[N, C, H, W]``, evaluated in fixed-size chunks."""
    dtype = next(iter(model.parameters().values())).dtype
    outs = [
        model.forward(Tensor(x[i:i + batch_size], dtype=dtype), mode, rng).data
        for i in range(0, len(x), batch_size)
    ]
    return np.concatenate(outs, axis=0)
