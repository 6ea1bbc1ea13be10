"""Staged classification models built from transformer blocks.

A model is a sequence of stages, each a strided convolutional embedding
followed by a stack of pre-norm transformer blocks, finishing with a
token-wise LayerNorm, global average pooling, and a linear classifier.
The mixer inside every block is either an MRL block or full-token
self-attention, chosen once per model, so cost comparisons between the
two variants differ only in the mixing module.

Named reference specs live in a small registry; model_spec(name, ...)
returns a copy with any field overridden.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .block import MrlConfig, TransformerBlock, grid_to_tokens, tokens_to_grid
from .errors import ConfigError, ShapeError
from .layers import Conv2d, LayerNorm, Linear, Module
from .tensor import Tensor

MIXER_KINDS = ("mrl", "sa")


@dataclass(frozen=True)
class StageSpec:
    """One stage: an embedding conv then `blocks` transformer blocks."""

    blocks: int
    channels: int
    region_size: int
    embed_kernel: int = 3
    embed_stride: int = 2


@dataclass(frozen=True)
class ModelSpec:
    """Complete description of a classification model.

    head_dim is fixed per model; each stage derives heads = channels /
    head_dim. The remaining flags select the block variant and are shared
    by every stage.
    """

    name: str
    input_size: int
    stages: tuple[StageSpec, ...]
    in_channels: int = 3
    num_classes: int = 1000
    head_dim: int = 64
    mixer: str = "mrl"
    qkv_variant: str = "standard"
    local_mix: str = "plain-depthwise"
    local_kernel: int = 3
    sampler: str = "conv"


def stage_grid_sizes(spec: ModelSpec) -> list[int]:
    """Post-embedding spatial side length of every stage.

    Validates the whole spec; raises ConfigError naming the first offending
    stage. The returned sizes are what the blocks of each stage operate on.
    """
    if spec.mixer not in MIXER_KINDS:
        raise ConfigError(f"unknown mixer: {spec.mixer!r}")
    if not spec.stages:
        raise ConfigError("model needs at least one stage")
    if spec.input_size < 1 or spec.in_channels < 1 or spec.num_classes < 1:
        raise ConfigError(
            f"input_size, in_channels, num_classes must be >= 1, got "
            f"{spec.input_size}, {spec.in_channels}, {spec.num_classes}")
    if spec.head_dim < 1:
        raise ConfigError(f"head_dim must be >= 1, got {spec.head_dim}")

    sizes = []
    side = spec.input_size
    for i, st in enumerate(spec.stages):
        where = f"stage {i}"
        if st.blocks < 1:
            raise ConfigError(f"{where}: blocks must be >= 1, got {st.blocks}")
        if st.embed_kernel % 2 != 1:
            raise ConfigError(
                f"{where}: embed kernel must be odd for symmetric padding, "
                f"got {st.embed_kernel}")
        if st.embed_stride < 1:
            raise ConfigError(f"{where}: embed stride must be >= 1")
        if st.channels % spec.head_dim != 0:
            raise ConfigError(
                f"{where}: channels {st.channels} not divisible by "
                f"head_dim {spec.head_dim}")
        pad = (st.embed_kernel - 1) // 2
        side = (side + 2 * pad - st.embed_kernel) // st.embed_stride + 1
        if side < 1:
            raise ConfigError(f"{where}: embedding collapses the input to nothing")
        if spec.mixer == "mrl" and side % st.region_size != 0:
            raise ConfigError(
                f"{where}: spatial size {side} not divisible by region size "
                f"{st.region_size}")
        sizes.append(side)
    return sizes


def _stage_config(spec: ModelSpec, st: StageSpec) -> MrlConfig:
    return MrlConfig(
        channels=st.channels,
        region_size=st.region_size,
        heads=st.channels // spec.head_dim,
        head_dim=spec.head_dim,
        qkv_variant=spec.qkv_variant,
        local_mix=spec.local_mix,
        local_kernel=spec.local_kernel,
        sampler=spec.sampler,
    )


class Stage(Module):
    """Embedding conv + token LayerNorm + a stack of transformer blocks."""

    def __init__(self, spec: ModelSpec, st: StageSpec, in_channels: int, rng=None):
        self.embed = Conv2d(in_channels, st.channels, st.embed_kernel,
                            stride=st.embed_stride,
                            padding=(st.embed_kernel - 1) // 2, rng=rng)
        self.norm = LayerNorm(st.channels)
        config = _stage_config(spec, st)
        self.blocks = [TransformerBlock(config, mixer=spec.mixer, rng=rng)
                       for _ in range(st.blocks)]

    def forward(self, x: Tensor) -> Tensor:
        x = self.embed(x)
        side = x.shape[2]
        x = tokens_to_grid(self.norm(grid_to_tokens(x)), side, side)
        for block in self.blocks:
            x = block(x)
        return x


class ClassificationModel(Module):
    """Stages -> final token LayerNorm -> global average pool -> linear head."""

    def __init__(self, spec: ModelSpec, rng=None):
        stage_grid_sizes(spec)
        self.spec = spec
        stages = []
        c_in = spec.in_channels
        for st in spec.stages:
            stages.append(Stage(spec, st, c_in, rng=rng))
            c_in = st.channels
        self.stages = stages
        self.final_norm = LayerNorm(c_in)
        self.head = Linear(c_in, spec.num_classes, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"model expects (N, {self.spec.in_channels}, "
                f"{self.spec.input_size}, {self.spec.input_size}), got {x.shape}")
        if x.shape[2] != self.spec.input_size or x.shape[3] != self.spec.input_size:
            raise ShapeError(
                f"model was validated for input size {self.spec.input_size}, "
                f"got {x.shape[2]}x{x.shape[3]}")
        for stage in self.stages:
            x = stage(x)
        tokens = self.final_norm(grid_to_tokens(x))
        return self.head(tokens.mean(axis=1))


def build_model(spec: ModelSpec, seed: int = 0) -> ClassificationModel:
    """Instantiate a model with every parameter drawn from one seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return ClassificationModel(spec, rng=rng)


# ----------------------------------------------------------------------
# reference specs


_REGISTRY = {
    "mrl-tiny": ModelSpec(
        name="mrl-tiny",
        input_size=32,
        stages=(
            StageSpec(blocks=1, channels=32, region_size=2),
            StageSpec(blocks=2, channels=64, region_size=2),
        ),
        num_classes=4,
        head_dim=16,
        sampler="conv",
    ),
    "mrl-cvt-13": ModelSpec(
        name="mrl-cvt-13",
        input_size=224,
        stages=(
            StageSpec(blocks=1, channels=64, region_size=4,
                      embed_kernel=7, embed_stride=4),
            StageSpec(blocks=2, channels=192, region_size=4),
            StageSpec(blocks=10, channels=384, region_size=2),
        ),
        sampler="depthwise",
    ),
    "mrl-cvt-21": ModelSpec(
        name="mrl-cvt-21",
        input_size=224,
        stages=(
            StageSpec(blocks=1, channels=64, region_size=4,
                      embed_kernel=7, embed_stride=4),
            StageSpec(blocks=4, channels=192, region_size=4),
            StageSpec(blocks=16, channels=384, region_size=2),
        ),
        sampler="depthwise",
    ),
}


def model_names() -> tuple[str, ...]:
    return tuple(_REGISTRY)


def model_spec(name: str, **overrides) -> ModelSpec:
    """Look up a named spec, optionally overriding any field."""
    if name not in _REGISTRY:
        known = ", ".join(sorted(_REGISTRY))
        raise ConfigError(f"unknown model {name!r}; known: {known}")
    base = _REGISTRY[name]
    try:
        return dataclasses.replace(base, **overrides)
    except TypeError as exc:
        raise ConfigError(f"bad override for {name}: {exc}") from None
