"""Verification suites behind the gradcheck and equivariance CLI commands.

Each suite returns a list of SuiteRow results so both the CLI (pass/fail
table, exit code) and the test suite consume the same code path. Rows are
deliberately desk-scale: the full gradient suite stays under two minutes
on one core.

Every gradient check scalarizes through a fixed random probe,
sum(output * probe), because structurally flat losses (for example
sum of softmax, which is constant) have an exactly zero gradient and turn
the relative-error metric into noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .block import (CommonQkv, GcLocalMix, MrlBlock, MrlConfig, TransformerBlock,
                    region_sample, upscale_sum)
from .layers import (Conv2d, DepthwiseConv2d, FeedForward, LayerNorm, Linear,
                     MultiHeadSelfAttention, P4Conv, softmax_lastdim)
from .tensor import Tensor, grad_check_targets

PROBE_SEED_SALT = 0x5EED


@dataclass(frozen=True)
class SuiteRow:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.value < self.tolerance


def _rng(seed: int):
    return np.random.Generator(np.random.PCG64(seed))


def _rand(shape, seed: int, requires_grad: bool = False) -> Tensor:
    return Tensor(_rng(seed).uniform(-1, 1, shape), requires_grad=requires_grad)


def probe_loss(out: Tensor, seed: int) -> Tensor:
    probe = Tensor(_rng(seed ^ PROBE_SEED_SALT).uniform(-1, 1, out.shape))
    return (out * probe).sum()


def _module_check(build, input_shape, seed: int) -> float:
    """Gradcheck a module against both its input and every parameter."""
    module = build(_rng(seed))
    x = _rand(input_shape, seed + 1, requires_grad=True)
    targets = [x] + [p for _, p in module.named_parameters()]
    return grad_check_targets(lambda: probe_loss(module(x), seed), targets)


# ----------------------------------------------------------------------
# gradient suite


def _check_linear(seed):
    return _module_check(lambda r: Linear(5, 4, rng=r), (3, 5), seed)


def _check_conv2d(seed):
    return _module_check(lambda r: Conv2d(2, 3, 3, stride=1, padding=1, rng=r),
                         (2, 2, 5, 5), seed)


def _check_depthwise(seed):
    return _module_check(lambda r: DepthwiseConv2d(3, 3, rng=r), (2, 3, 5, 5), seed)


def _check_p4_lifting(seed):
    return _module_check(lambda r: P4Conv(2, 2, 3, mode="lifting", rng=r),
                         (1, 2, 5, 5), seed)


def _check_p4_group(seed):
    return _module_check(lambda r: P4Conv(8, 2, 3, mode="group", rng=r),
                         (1, 8, 5, 5), seed)


def _check_layernorm(seed):
    return _module_check(lambda r: LayerNorm(6), (4, 6), seed)


def _check_softmax(seed):
    x = _rand((3, 5), seed, requires_grad=True)
    return grad_check_targets(lambda: probe_loss(softmax_lastdim(x), seed), [x])


def _check_gelu(seed):
    x = _rand((4, 3), seed, requires_grad=True)
    return grad_check_targets(lambda: probe_loss(x.gelu(), seed), [x])


def _check_ffn(seed):
    return _module_check(lambda r: FeedForward(5, rng=r), (3, 5), seed)


def _check_attention(seed):
    return _module_check(lambda r: MultiHeadSelfAttention(6, 2, rng=r), (4, 6), seed)


def _check_attention_commonqkv(seed):
    def build(r):
        return MultiHeadSelfAttention(6, 2, projection=CommonQkv(6, 3, rng=r), rng=r)
    return _module_check(build, (4, 6), seed)


def _check_region_sample(seed):
    sampler = Conv2d(2, 2, 2, stride=2, rng=_rng(seed))
    x = _rand((1, 2, 4, 4), seed + 1, requires_grad=True)
    targets = [x] + [p for _, p in sampler.named_parameters()]
    return grad_check_targets(
        lambda: probe_loss(region_sample(x, sampler), seed), targets)


def _check_upscale_sum(seed):
    x = _rand((1, 2, 4, 4), seed, requires_grad=True)
    regional = _rand((1, 2, 2, 2), seed + 1, requires_grad=True)
    return grad_check_targets(
        lambda: probe_loss(upscale_sum(x, regional, 2), seed), [x, regional])


def _check_local_gc(seed):
    return _module_check(lambda r: GcLocalMix(4, 3, rng=r), (1, 4, 4, 4), seed)


def _check_mrl_block(seed):
    config = MrlConfig(channels=8, region_size=2, heads=2)
    return _module_check(lambda r: MrlBlock(config, rng=r), (1, 8, 4, 4), seed)


def _check_transformer_block(seed):
    config = MrlConfig(channels=8, region_size=2, heads=2)
    return _module_check(lambda r: TransformerBlock(config, rng=r), (1, 8, 4, 4), seed)


LAYER_TOL = 1e-6
BLOCK_TOL = 1e-4

GRADCHECK_ROWS = (
    ("linear", _check_linear, LAYER_TOL),
    ("conv2d", _check_conv2d, LAYER_TOL),
    ("depthwise-conv2d", _check_depthwise, LAYER_TOL),
    ("p4-conv-lifting", _check_p4_lifting, LAYER_TOL),
    ("p4-conv-group", _check_p4_group, LAYER_TOL),
    ("layernorm", _check_layernorm, LAYER_TOL),
    ("softmax", _check_softmax, LAYER_TOL),
    ("gelu", _check_gelu, LAYER_TOL),
    ("feedforward", _check_ffn, LAYER_TOL),
    ("attention-standard", _check_attention, LAYER_TOL),
    ("attention-commonqkv", _check_attention_commonqkv, LAYER_TOL),
    ("region-sample", _check_region_sample, LAYER_TOL),
    ("upscale-sum", _check_upscale_sum, LAYER_TOL),
    ("local-mix-gc-p4", _check_local_gc, LAYER_TOL),
    ("mrl-block", _check_mrl_block, BLOCK_TOL),
    ("transformer-block", _check_transformer_block, BLOCK_TOL),
)


def gradcheck_suite(base_seed: int = 0, seeds: int = 5) -> list[SuiteRow]:
    """Max relative gradient error per layer across `seeds` seeds."""
    rows = []
    for name, check, tol in GRADCHECK_ROWS:
        worst = max(check(base_seed + i) for i in range(seeds))
        rows.append(SuiteRow(name=name, value=worst, tolerance=tol))
    return rows


# ----------------------------------------------------------------------
# equivariance suite


def _roll_orientations(y: np.ndarray) -> np.ndarray:
    n, c4, h, w = y.shape
    blocks = y.reshape(n, 4, c4 // 4, h, w)
    return np.roll(blocks, 1, axis=1).reshape(n, c4, h, w)


def _equivariance_err(mode: str, seed: int) -> float:
    rng = _rng(seed)
    if mode == "lifting":
        conv = P4Conv(3, 2, 3, mode="lifting", rng=rng)
        x = _rand((2, 3, 6, 6), seed + 1)
        rotated_in = Tensor(np.ascontiguousarray(np.rot90(x.data, 1, axes=(2, 3))))
    else:
        conv = P4Conv(8, 2, 3, mode="group", rng=rng)
        x = _rand((2, 8, 6, 6), seed + 1)
        rolled = _roll_orientations(np.rot90(x.data, 1, axes=(2, 3)))
        rotated_in = Tensor(np.ascontiguousarray(rolled))
    lhs = conv(rotated_in).data
    rhs = _roll_orientations(np.rot90(conv(x).data, 1, axes=(2, 3)))
    scale = max(np.abs(lhs).max(), np.abs(rhs).max(), 1e-12)
    return float(np.abs(lhs - rhs).max() / scale)


EQUIVARIANCE_TOL = 1e-10


def equivariance_suite(base_seed: int = 0, seeds: int = 10) -> list[SuiteRow]:
    """p4 rotation-commutation identity for both conv modes."""
    rows = []
    for mode in ("lifting", "group"):
        worst = max(_equivariance_err(mode, base_seed + i) for i in range(seeds))
        rows.append(SuiteRow(name=f"p4-{mode}", value=worst,
                             tolerance=EQUIVARIANCE_TOL))
    return rows


def format_rows(rows: list[SuiteRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = []
    for r in rows:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name:<{width}}  {r.value:.3e}  < {r.tolerance:.0e}  {status}")
    return "\n".join(lines)
