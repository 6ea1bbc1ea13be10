"""Neural network layers built on the Tensor autodiff core.

Every layer is a Module holding its parameters as differentiable Tensors.
Weights initialize uniform in +-1/sqrt(fan_in) from a caller-supplied numpy
Generator, so a single seed fixes every parameter in a model.

Convolution forwards accumulate with explicit Python loops in a fixed order,
(c_in, ki, kj) for dense and (ki, kj) for depthwise, vectorized only across
independent output elements. Each output element therefore sees the exact
rounding sequence of the textbook quadruple loop, which is what the
bit-exactness tests against naive oracles rely on. Backward passes use fast
einsum contractions; their correctness is covered by gradient checks, not
bit-exactness.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, concat, pad2d, slice_axis


def _default_rng(rng):
    return rng if rng is not None else np.random.default_rng(0)


def _uniform_param(rng, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Minimal parameter container with deterministic traversal order.

    Parameters are discovered by walking ``__dict__`` in insertion order,
    recursing into child Modules and lists of Modules. The resulting name
    order is stable, which the checkpoint format and optimizer rely on.
    """

    def named_parameters(self, prefix: str = ""):
        for attr, value in self.__dict__.items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


# ----------------------------------------------------------------------
# convolution primitives


def conv2d_op(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) cross-correlation, NCHW by OIHW, floor semantics.

    Output spatial size is (H - k) // stride + 1. The forward accumulation
    order over (c_in, ki, kj) is a contract: the bit-exactness oracle
    reproduces it with scalar loops.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d needs rank-4 input and weight, got {x.shape}, {w.shape}")
    n, c_in, h, width = xd.shape
    c_out, c_in_w, kh, kw = wd.shape
    if kh != kw:
        raise ShapeError(f"conv2d kernels must be square, got {kh}x{kw}")
    if c_in != c_in_w:
        raise ShapeError(f"conv2d channel mismatch: input {c_in}, weight {c_in_w}")
    k, s = kh, int(stride)
    if s < 1:
        raise ShapeError(f"stride must be >= 1, got {s}")
    if k > h or k > width:
        raise ShapeError(f"kernel {k} larger than input {h}x{width}")
    ho = (h - k) // s + 1
    wo = (width - k) // s + 1

    out = np.zeros((n, c_out, ho, wo))
    tmp = np.empty_like(out)
    for c in range(c_in):
        xc = xd[:, c]
        for i in range(k):
            for j in range(k):
                window = xc[:, i:i + s * ho:s, j:j + s * wo:s]
                np.multiply(window[:, None, :, :], wd[None, :, c, i, j, None, None], out=tmp)
                out += tmp

    def bw(g):
        dx = np.zeros_like(xd)
        dw = np.zeros_like(wd)
        for i in range(k):
            for j in range(k):
                window = xd[:, :, i:i + s * ho:s, j:j + s * wo:s]
                dw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, window, optimize=True)
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.einsum(
                    "nohw,oc->nchw", g, wd[:, :, i, j], optimize=True)
        return dx, dw

    return x._record(out, (x, w), bw)


def depthwise2d_op(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Valid depthwise cross-correlation: one k x k filter per channel.

    Forward accumulates in (ki, kj) order; channels never mix.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 3:
        raise ShapeError(
            f"depthwise needs rank-4 input and rank-3 weight, got {x.shape}, {w.shape}")
    n, c, h, width = xd.shape
    c_w, kh, kw = wd.shape
    if kh != kw:
        raise ShapeError(f"depthwise kernels must be square, got {kh}x{kw}")
    if c != c_w:
        raise ShapeError(f"depthwise channel mismatch: input {c}, weight {c_w}")
    k, s = kh, int(stride)
    if s < 1:
        raise ShapeError(f"stride must be >= 1, got {s}")
    if k > h or k > width:
        raise ShapeError(f"kernel {k} larger than input {h}x{width}")
    ho = (h - k) // s + 1
    wo = (width - k) // s + 1

    out = np.zeros((n, c, ho, wo))
    tmp = np.empty_like(out)
    for i in range(k):
        for j in range(k):
            window = xd[:, :, i:i + s * ho:s, j:j + s * wo:s]
            np.multiply(window, wd[None, :, i, j, None, None], out=tmp)
            out += tmp

    def bw(g):
        dx = np.zeros_like(xd)
        dw = np.zeros_like(wd)
        for i in range(k):
            for j in range(k):
                window = xd[:, :, i:i + s * ho:s, j:j + s * wo:s]
                dw[:, i, j] = np.einsum("nchw,nchw->c", g, window, optimize=True)
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += g * wd[None, :, i, j, None, None]
        return dx, dw

    return x._record(out, (x, w), bw)


# ----------------------------------------------------------------------
# layers


class Linear(Module):
    """y = x W^T + b over the last axis; x may carry any leading axes."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng=None):
        rng = _default_rng(rng)
        if in_features < 1 or out_features < 1:
            raise ConfigError("linear features must be >= 1")
        self.in_features = in_features
        self.out_features = out_features
        self.weight = _uniform_param(rng, (out_features, in_features), in_features)
        self.bias = _uniform_param(rng, (out_features,), in_features) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(
                f"linear expects last axis {self.in_features}, got {x.shape}")
        flat = x if x.ndim >= 2 else x.reshape(1, x.shape[0])
        y = flat @ self.weight.permute(1, 0)
        if x.ndim < 2:
            y = y.reshape(self.out_features)
        if self.bias is not None:
            y = y + self.bias
        return y


class Conv2d(Module):
    """Dense 2-D convolution with optional symmetric zero padding."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0, bias: bool = True, rng=None):
        rng = _default_rng(rng)
        if kernel < 1:
            raise ConfigError(f"kernel must be >= 1, got {kernel}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        self.weight = _uniform_param(rng, (out_channels, in_channels, kernel, kernel), fan_in)
        self.bias = _uniform_param(rng, (out_channels,), fan_in) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = conv2d_op(pad2d(x, self.padding), self.weight, self.stride)
        if self.bias is not None:
            y = y + self.bias.reshape(1, self.out_channels, 1, 1)
        return y


class DepthwiseConv2d(Module):
    """Per-channel 2-D convolution.

    padding="same" keeps the spatial size (stride 1, odd kernel); an integer
    padding with stride > 1 covers strided samplers.
    """

    def __init__(self, channels: int, kernel: int, stride: int = 1,
                 padding="same", bias: bool = True, rng=None):
        rng = _default_rng(rng)
        if padding == "same":
            if kernel % 2 != 1:
                raise ConfigError(f"same padding needs an odd kernel, got {kernel}")
            if stride != 1:
                raise ConfigError("same padding is defined for stride 1 only")
            padding = (kernel - 1) // 2
        self.channels = channels
        self.kernel = kernel
        self.stride = stride
        self.padding = int(padding)
        fan_in = kernel * kernel
        self.weight = _uniform_param(rng, (channels, kernel, kernel), fan_in)
        self.bias = _uniform_param(rng, (channels,), fan_in) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = depthwise2d_op(pad2d(x, self.padding), self.weight, self.stride)
        if self.bias is not None:
            y = y + self.bias.reshape(1, self.channels, 1, 1)
        return y


class P4Conv(Module):
    """Convolution equivariant to quarter turns (the p4 rotation group).

    Two modes:

    - "lifting": plane input (N, C_in, H, W) to group output
      (N, 4 * out_channels, H, W). Orientation block o applies the base
      filter rotated o quarter turns, so rotating the input permutes the
      orientation blocks and rotates each map.
    - "group": group input to group output. in_channels counts the full
      rotation-major layout (orientation-major blocks of base channels) and
      must be divisible by 4. The filter for output orientation s is the
      base filter rotated s turns with its input-orientation blocks rolled
      by s, assembled here into one big convolution.

    Same padding, odd square kernels, square inputs. No bias: a per-channel
    bias shared across orientations could be added without breaking
    equivariance but the layer stays tied to its weight count C_out*C_in*k^2.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 mode: str = "lifting", rng=None):
        rng = _default_rng(rng)
        if mode not in ("lifting", "group"):
            raise ConfigError(f"unknown p4 mode: {mode!r}")
        if kernel % 2 != 1:
            raise ConfigError(f"p4 conv needs an odd kernel, got {kernel}")
        if mode == "group" and in_channels % 4 != 0:
            raise ShapeError(
                f"group mode input channels must be divisible by 4, got {in_channels}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.mode = mode
        fan_in = in_channels * kernel * kernel
        self.weight = _uniform_param(rng, (out_channels, in_channels, kernel, kernel), fan_in)

    def _filters(self) -> Tensor:
        if self.mode == "lifting":
            return concat([self.weight.rot90(o) for o in range(4)], axis=0)
        base = self.in_channels // 4
        parts = []
        for s in range(4):
            ws = self.weight.rot90(s)
            if s == 0:
                parts.append(ws)
                continue
            blocks = [slice_axis(ws, 1, r * base, (r + 1) * base) for r in range(4)]
            parts.append(concat(blocks[4 - s:] + blocks[:4 - s], axis=1))
        return concat(parts, axis=0)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"p4 conv needs rank-4 input, got {x.shape}")
        if x.shape[2] != x.shape[3]:
            raise ShapeError(f"p4 conv needs square inputs, got {x.shape}")
        if x.shape[1] != self.in_channels:
            raise ShapeError(
                f"p4 conv expects {self.in_channels} input channels, got {x.shape}")
        return conv2d_op(pad2d(x, (self.kernel - 1) // 2), self._filters(), 1)


class LayerNorm(Module):
    """Normalization over the last axis with learned scale and shift."""

    EPS = 1e-5

    def __init__(self, dim: int, rng=None):
        self.dim = dim
        self.scale = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"layernorm expects last axis {self.dim}, got {x.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered / (var + self.EPS).sqrt()
        return normed * self.scale + self.shift


def softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis.

    The row max is subtracted as a constant; softmax is shift invariant so
    the gradient is exact even though the shift is off the tape.
    """
    shift = Tensor(np.max(x.data, axis=-1, keepdims=True))
    e = (x - shift).exp()
    return e / e.sum(axis=-1, keepdims=True)


class FeedForward(Module):
    """Token-wise MLP: expand 4x, exact GELU, project back."""

    EXPANSION = 4

    def __init__(self, dim: int, rng=None):
        rng = _default_rng(rng)
        hidden = self.EXPANSION * dim
        self.expand = Linear(dim, hidden, rng=rng)
        self.project = Linear(hidden, dim, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.project(self.expand(x).gelu())


class StandardQkv(Module):
    """Q, K, V via three independent linear maps (the usual projection).

    Bias-free by default: a key bias shifts every row of the score matrix
    by a constant, which softmax ignores, so its gradient is identically
    zero and its parameters are dead weight.
    """

    def __init__(self, channels: int, bias: bool = False, rng=None):
        rng = _default_rng(rng)
        self.q = Linear(channels, channels, bias=bias, rng=rng)
        self.k = Linear(channels, channels, bias=bias, rng=rng)
        self.v = Linear(channels, channels, bias=bias, rng=rng)

    def project(self, tokens: Tensor):
        return self.q(tokens), self.k(tokens), self.v(tokens)


class MultiHeadSelfAttention(Module):
    """Softmax attention over a token sequence.

    Args:
        channels: embedding width C.
        heads: head count h; C must divide evenly into h * d_h.
        projection: object with ``project(tokens) -> (q, k, v)``. Defaults
            to StandardQkv; the regional block can pass a shared-basis
            projection instead.
        bias: whether the output projection carries a bias.

    Accepts (T, C) or (N, T, C) tokens and preserves the layout.
    """

    def __init__(self, channels: int, heads: int, projection=None,
                 bias: bool = True, rng=None):
        rng = _default_rng(rng)
        if heads < 1:
            raise ConfigError(f"heads must be >= 1, got {heads}")
        if channels % heads != 0:
            raise ConfigError(
                f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        self.head_dim = channels // heads
        self.projection = projection if projection is not None else StandardQkv(
            channels, rng=rng)
        self.out = Linear(channels, channels, bias=bias, rng=rng)

    def _split_heads(self, t: Tensor, batched: bool) -> Tensor:
        if batched:
            n, seq, _ = t.shape
            return t.reshape(n, seq, self.heads, self.head_dim).permute(0, 2, 1, 3)
        seq = t.shape[0]
        return t.reshape(seq, self.heads, self.head_dim).permute(1, 0, 2)

    def _merge_heads(self, t: Tensor, batched: bool) -> Tensor:
        if batched:
            n, _, seq, _ = t.shape
            return t.permute(0, 2, 1, 3).reshape(n, seq, self.channels)
        seq = t.shape[1]
        return t.permute(1, 0, 2).reshape(seq, self.channels)

    def forward(self, tokens: Tensor) -> Tensor:
        if tokens.ndim not in (2, 3):
            raise ShapeError(f"attention expects (T, C) or (N, T, C), got {tokens.shape}")
        if tokens.shape[-1] != self.channels:
            raise ShapeError(
                f"attention expects channel width {self.channels}, got {tokens.shape}")
        batched = tokens.ndim == 3
        q, k, v = self.projection.project(tokens)
        q = self._split_heads(q, batched) * (1.0 / math.sqrt(self.head_dim))
        k = self._split_heads(k, batched)
        v = self._split_heads(v, batched)
        scores = q @ k.permute(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)
        attn = softmax_lastdim(scores)
        context = attn @ v
        return self.out(self._merge_heads(context, batched))
