"""The mixing-regionally-and-locally block and its host transformer block.

An MRL block replaces full-token self-attention with five steps:

1. partition the n x n input into non-overlapping r x r regions,
2. sample each region to one feature vector (learned conv, kernel = stride = r),
3. mix regionally: full self-attention over the (n/r) x (n/r) sampled grid,
4. upscale the attended grid by nearest neighbor and add it to the block input,
5. mix locally with a small depthwise convolution (optionally augmented with
   a rotation-equivariant group convolution).

Shapes are preserved end to end, so the block is a drop-in substitute for
multi-head self-attention inside a pre-norm transformer block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError, ShapeError
from .layers import (
    Conv2d,
    DepthwiseConv2d,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadSelfAttention,
    P4Conv,
    StandardQkv,
)
from .tensor import Tensor

QKV_VARIANTS = ("standard", "commonqkv")
LOCAL_MIX_KINDS = ("plain-depthwise", "gc-p4")
SAMPLER_KINDS = ("conv", "depthwise")


@dataclass
class MrlConfig:
    """Hyperparameters of one MRL block.

    channels is the block width D; heads * head_dim must equal D. sampler
    chooses the region-sampling conv: "conv" is a dense D -> D convolution,
    "depthwise" one r x r filter per channel (the budget the reference
    models are built with).
    """

    channels: int
    region_size: int
    heads: int = 1
    head_dim: int | None = None
    qkv_variant: str = "standard"
    local_mix: str = "plain-depthwise"
    local_kernel: int = 3
    sampler: str = "conv"

    def __post_init__(self):
        if self.head_dim is None:
            if self.channels % self.heads != 0:
                raise ConfigError(
                    f"channels {self.channels} not divisible by heads {self.heads}")
            self.head_dim = self.channels // self.heads
        if self.heads * self.head_dim != self.channels:
            raise ConfigError(
                f"heads * head_dim must equal channels: {self.heads} * "
                f"{self.head_dim} != {self.channels}")
        if self.region_size < 1:
            raise ConfigError(f"region_size must be >= 1, got {self.region_size}")
        if self.qkv_variant not in QKV_VARIANTS:
            raise ConfigError(f"unknown qkv_variant: {self.qkv_variant!r}")
        if self.local_mix not in LOCAL_MIX_KINDS:
            raise ConfigError(f"unknown local_mix: {self.local_mix!r}")
        if self.local_mix == "gc-p4" and self.channels % 4 != 0:
            raise ConfigError(
                f"gc-p4 local mix needs channels divisible by 4, got {self.channels}")
        if self.local_kernel % 2 != 1:
            raise ConfigError(f"local_kernel must be odd, got {self.local_kernel}")
        if self.sampler not in SAMPLER_KINDS:
            raise ConfigError(f"unknown sampler: {self.sampler!r}")


# ----------------------------------------------------------------------
# token/grid layout converters


def grid_to_tokens(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, H*W, C), rows in row-major spatial order."""
    if x.ndim != 4:
        raise ShapeError(f"grid_to_tokens needs rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    return x.permute(0, 2, 3, 1).reshape(n, h * w, c)


def tokens_to_grid(tokens: Tensor, h: int, w: int) -> Tensor:
    """(N, H*W, C) -> (N, C, H, W); inverse of grid_to_tokens."""
    if tokens.ndim != 3:
        raise ShapeError(f"tokens_to_grid needs rank-3 input, got {tokens.shape}")
    n, t, c = tokens.shape
    if t != h * w:
        raise ShapeError(f"token count {t} does not fill a {h}x{w} grid")
    return tokens.reshape(n, h, w, c).permute(0, 3, 1, 2)


def _square_side(x: Tensor) -> int:
    if x.ndim != 4:
        raise ShapeError(f"expected rank-4 NCHW input, got {x.shape}")
    if x.shape[2] != x.shape[3]:
        raise ShapeError(f"expected square spatial extent, got {x.shape}")
    return x.shape[2]


def _check_partition(n: int, r: int) -> int:
    if n % r != 0:
        raise ShapeError(
            f"spatial size {n} is not divisible by region size {r}; "
            "inputs are never padded to fit")
    return n // r


# ----------------------------------------------------------------------
# step 1: region partition


def region_partition(x: Tensor, r: int) -> Tensor:
    """Tile (N, C, n, n) into (N, (n/r)^2, C, r, r), regions in row-major
    grid order. Pure rearrangement: reassemble_regions inverts it exactly."""
    n_side = _square_side(x)
    g = _check_partition(n_side, r)
    n, c = x.shape[0], x.shape[1]
    tiled = x.reshape(n, c, g, r, g, r).permute(0, 2, 4, 1, 3, 5)
    return tiled.reshape(n, g * g, c, r, r)


def reassemble_regions(regions: Tensor, n_side: int) -> Tensor:
    """Inverse of region_partition."""
    if regions.ndim != 5:
        raise ShapeError(f"expected rank-5 regions, got {regions.shape}")
    n, num, c, r, r2 = regions.shape
    if r != r2:
        raise ShapeError(f"regions must be square, got {r}x{r2}")
    g = _check_partition(n_side, r)
    if num != g * g:
        raise ShapeError(f"{num} regions cannot tile a {n_side}x{n_side} input with r={r}")
    grid = regions.reshape(n, g, g, c, r, r).permute(0, 3, 1, 4, 2, 5)
    return grid.reshape(n, c, n_side, n_side)


# ----------------------------------------------------------------------
# step 2: region sampling


def region_sample(x: Tensor, sampler: Module) -> Tensor:
    """One learned feature vector per region.

    The sampler must be a conv layer with kernel == stride == r and no
    padding, so each output position reads exactly one region.
    """
    if sampler.kernel != sampler.stride:
        raise ConfigError(
            f"region sampler needs kernel == stride, got kernel {sampler.kernel} "
            f"stride {sampler.stride}")
    if getattr(sampler, "padding", 0) != 0:
        raise ConfigError("region sampler must not pad")
    n_side = _square_side(x)
    _check_partition(n_side, sampler.kernel)
    return sampler(x)


# ----------------------------------------------------------------------
# step 3: regional mixing


def regional_mix(sampled: Tensor, attention: MultiHeadSelfAttention) -> Tensor:
    """Full self-attention across the sampled grid; shape preserved."""
    g = _square_side(sampled)
    tokens = grid_to_tokens(sampled)
    return tokens_to_grid(attention(tokens), g, g)


# ----------------------------------------------------------------------
# step 4: upscale and sum


def upscale_sum(x: Tensor, regional: Tensor, r: int) -> Tensor:
    """x + nearest-neighbor-upsample(regional, factor r).

    Each output element is one addition, so the result is bit-identical to
    the textbook upsample-then-add, and the gradient with respect to
    regional is the r x r block sum of the upstream gradient.
    """
    n_side = _square_side(x)
    g = _check_partition(n_side, r)
    if regional.ndim != 4 or regional.shape != (x.shape[0], x.shape[1], g, g):
        raise ShapeError(
            f"regional shape {regional.shape} inconsistent with input "
            f"{x.shape} at r={r}")
    n, c = x.shape[0], x.shape[1]
    blocks = x.reshape(n, c, g, r, g, r)
    spread = regional.reshape(n, c, g, 1, g, 1)
    return (blocks + spread).reshape(n, c, n_side, n_side)


# ----------------------------------------------------------------------
# step 5: local mixing


class GcLocalMix(Module):
    """Local mix augmented with a p4 group convolution.

    depthwise(k x k) -> p4 lifting conv (D -> D/4 base channels across 4
    orientations) -> max-pool over orientations -> 1x1 projection back to D.
    The lifting sub-layer satisfies the p4 equivariance identity on its own.
    """

    def __init__(self, channels: int, kernel: int = 3, rng=None):
        if channels % 4 != 0:
            raise ConfigError(f"gc-p4 needs channels divisible by 4, got {channels}")
        self.channels = channels
        self.depthwise = DepthwiseConv2d(channels, kernel, rng=rng)
        self.lift = P4Conv(channels, channels // 4, kernel, mode="lifting", rng=rng)
        self.project = Conv2d(channels // 4, channels, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.lift(self.depthwise(x))
        n, _, h, w = y.shape
        pooled = y.reshape(n, 4, self.channels // 4, h, w).amax(axis=1)
        return self.project(pooled)


# ----------------------------------------------------------------------
# shared-basis QKV projection


class CommonQkv(Module):
    """Q, K, V from one shared basis.

    The basis is a single linear map of the tokens; Q, K and V are each a
    depthwise convolution of the basis over the sqrt(T) x sqrt(T) token
    grid. Parameter count is C^2 + 3*C*k^2 (bias-free), so the linear
    portion is exactly one third of the standard 3*C^2 projection.
    """

    def __init__(self, channels: int, kernel: int = 3, bias: bool = False, rng=None):
        self.channels = channels
        self.kernel = kernel
        self.basis = Linear(channels, channels, bias=bias, rng=rng)
        self.dw_q = DepthwiseConv2d(channels, kernel, bias=bias, rng=rng)
        self.dw_k = DepthwiseConv2d(channels, kernel, bias=bias, rng=rng)
        self.dw_v = DepthwiseConv2d(channels, kernel, bias=bias, rng=rng)

    def project(self, tokens: Tensor):
        if tokens.ndim not in (2, 3):
            raise ShapeError(f"expected (T, C) or (N, T, C) tokens, got {tokens.shape}")
        batched = tokens.ndim == 3
        t = tokens.shape[1] if batched else tokens.shape[0]
        g = math.isqrt(t)
        if g * g != t:
            raise ConfigError(
                f"commonqkv needs a square token count, got T={t}")
        basis = self.basis(tokens)
        grid = tokens_to_grid(basis if batched else basis.reshape(1, t, self.channels), g, g)
        outs = []
        for dw in (self.dw_q, self.dw_k, self.dw_v):
            mixed = grid_to_tokens(dw(grid))
            outs.append(mixed if batched else mixed.reshape(t, self.channels))
        return tuple(outs)


# ----------------------------------------------------------------------
# the block


class MrlBlock(Module):
    """The five-step composition; a drop-in replacement for full MHSA."""

    def __init__(self, config: MrlConfig, rng=None):
        self.config = config
        d, r = config.channels, config.region_size
        if config.sampler == "conv":
            self.sampler = Conv2d(d, d, r, stride=r, rng=rng)
        else:
            self.sampler = DepthwiseConv2d(d, r, stride=r, padding=0, rng=rng)
        if config.qkv_variant == "commonqkv":
            projection = CommonQkv(d, config.local_kernel, rng=rng)
        else:
            projection = StandardQkv(d, rng=rng)
        self.attention = MultiHeadSelfAttention(d, config.heads, projection=projection,
                                                rng=rng)
        if config.local_mix == "gc-p4":
            self.local = GcLocalMix(d, config.local_kernel, rng=rng)
        else:
            self.local = DepthwiseConv2d(d, config.local_kernel, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.channels:
            raise ShapeError(
                f"block expects (N, {self.config.channels}, n, n), got {x.shape}")
        _check_partition(_square_side(x), self.config.region_size)
        sampled = region_sample(x, self.sampler).require_finite("region sampling")
        attended = regional_mix(sampled, self.attention).require_finite(
            "regional attention")
        fused = upscale_sum(x, attended, self.config.region_size).require_finite(
            "upscale-sum")
        return self.local(fused).require_finite("local mix")


def mrl_forward(x: Tensor, block: MrlBlock) -> Tensor:
    return block(x)


class MhsaMixer(Module):
    """Full-token self-attention dressed as a grid mixer (the SA variant)."""

    def __init__(self, channels: int, heads: int, rng=None):
        self.channels = channels
        self.attention = MultiHeadSelfAttention(channels, heads, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        side = _square_side(x)
        return tokens_to_grid(self.attention(grid_to_tokens(x)), side, side)


class TransformerBlock(Module):
    """Pre-norm host block: y = x + mix(LN(x)); out = y + FFN(LN(y)).

    LayerNorm and the FFN act token-wise over the n^2 positions; the mixer
    is either an MrlBlock or an MhsaMixer, chosen at construction.
    """

    def __init__(self, config: MrlConfig, mixer: str = "mrl", rng=None):
        d = config.channels
        self.norm1 = LayerNorm(d)
        if mixer == "mrl":
            self.mixer = MrlBlock(config, rng=rng)
        elif mixer == "sa":
            self.mixer = MhsaMixer(d, config.heads, rng=rng)
        else:
            raise ConfigError(f"unknown mixer: {mixer!r}")
        self.norm2 = LayerNorm(d)
        self.ffn = FeedForward(d, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        side = _square_side(x)
        tokens = grid_to_tokens(x)
        mixed = self.mixer(tokens_to_grid(self.norm1(tokens), side, side))
        y = x + mixed
        y_tokens = grid_to_tokens(y)
        out_tokens = y_tokens + self.ffn(self.norm2(y_tokens))
        return tokens_to_grid(out_tokens, side, side)
