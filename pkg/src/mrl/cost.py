"""Analytic parameter and multiply-accumulate accounting.

Closed-form counts per layer kind, never measured from instantiated
arrays, so the instantiate-and-count oracle in the tests stays genuinely
independent. Conventions:

- FLOPs = 2 * MACs throughout.
- Normalizations, activations, and softmax count zero MACs (they are not
  multiply-accumulate dominated); their learnable parameters still count.
- A report entry's name mirrors the parameter prefix of the same piece in
  the built model, so entries and named_parameters can be joined exactly.

Every entry is tagged "attention-module" (the mixing module: sampler,
QKV projection, attention core, output projection, local mix) or
"rest-of-network" (embeddings, norms, FFNs, classifier head). Variant
swaps touch only the attention-module group by construction.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .block import CommonQkv, GcLocalMix, MhsaMixer, MrlBlock, TransformerBlock
from .errors import CostModelError
from .layers import (Conv2d, DepthwiseConv2d, FeedForward, LayerNorm, Linear,
                     Module, MultiHeadSelfAttention, P4Conv, StandardQkv)
from .model import ModelSpec, StageSpec, stage_grid_sizes

GROUP_ATTENTION = "attention-module"
GROUP_REST = "rest-of-network"

VARIANTS = ("sa", "mrl", "cq+mrl")

ZERO_MAC_NOTE = ("layernorm, softmax, and gelu are counted as zero-MAC; "
                 "their learnable parameters are still counted")
FLOPS_NOTE = "flops = 2 * macs"


@dataclass(frozen=True)
class LayerCost:
    name: str
    group: str
    params: int
    macs: int

    @property
    def flops(self) -> int:
        return 2 * self.macs


@dataclass(frozen=True)
class CostReport:
    spec_name: str
    variant: str
    input_size: int
    entries: tuple[LayerCost, ...]

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def total_macs(self) -> int:
        return sum(e.macs for e in self.entries)

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs

    def group_params(self, group: str) -> int:
        return sum(e.params for e in self.entries if e.group == group)

    def group_macs(self, group: str) -> int:
        return sum(e.macs for e in self.entries if e.group == group)

    def group_flops(self, group: str) -> int:
        return 2 * self.group_macs(group)


# ----------------------------------------------------------------------
# closed-form counts for single layers


def attention_core_macs(tokens: int, channels: int) -> int:
    """QK^T plus attention-times-V: 2 * T^2 * C."""
    return 2 * tokens * tokens * channels


def _conv_out_side(side: int, kernel: int, stride: int, padding: int) -> int:
    out = (side + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise CostModelError(
            f"kernel {kernel} stride {stride} padding {padding} collapses a "
            f"side of {side}")
    return out


def _tokens_of(shape, features: int) -> int:
    if not shape or shape[-1] != features:
        raise CostModelError(
            f"expected trailing feature axis of {features}, got shape {tuple(shape)}")
    t = 1
    for d in shape[:-1]:
        t *= d
    return t


def _spatial_of(shape, channels: int):
    """(C, H, W) or (N, C, H, W) -> (batch, H, W)."""
    if len(shape) == 3:
        n, (c, h, w) = 1, shape
    elif len(shape) == 4:
        n, c, h, w = shape
    else:
        raise CostModelError(f"expected (C, H, W) or (N, C, H, W), got {tuple(shape)}")
    if c != channels:
        raise CostModelError(f"expected {channels} input channels, got {c}")
    return n, h, w


def count_params(layer: Module) -> int:
    """Learnable scalar count from constructor hyperparameters alone."""
    if isinstance(layer, Linear):
        n = layer.in_features * layer.out_features
        return n + (layer.out_features if layer.bias is not None else 0)
    if isinstance(layer, Conv2d):
        n = layer.out_channels * layer.in_channels * layer.kernel ** 2
        return n + (layer.out_channels if layer.bias is not None else 0)
    if isinstance(layer, DepthwiseConv2d):
        n = layer.channels * layer.kernel ** 2
        return n + (layer.channels if layer.bias is not None else 0)
    if isinstance(layer, P4Conv):
        return layer.out_channels * layer.in_channels * layer.kernel ** 2
    if isinstance(layer, LayerNorm):
        return 2 * layer.dim
    # composites: walk children in definition order, summing leaf formulas
    if isinstance(layer, Module):
        total = 0
        for value in layer.__dict__.values():
            if isinstance(value, Module):
                total += count_params(value)
            elif isinstance(value, (list, tuple)):
                total += sum(count_params(v) for v in value if isinstance(v, Module))
            elif hasattr(value, "requires_grad") and getattr(value, "requires_grad"):
                raise CostModelError(
                    f"{type(layer).__name__} holds a bare parameter outside "
                    "any known layer kind")
        return total
    raise CostModelError(f"cannot count params of {type(layer).__name__}")


def count_macs(layer: Module, input_shape) -> int:
    """Multiply-accumulates for one forward pass over input_shape.

    The count covers the full shape as given (a leading batch axis
    multiplies the count). Zero-MAC layers return 0.
    """
    shape = tuple(input_shape)
    if isinstance(layer, Linear):
        return _tokens_of(shape, layer.in_features) * layer.in_features * layer.out_features
    if isinstance(layer, Conv2d):
        n, h, w = _spatial_of(shape, layer.in_channels)
        ho = _conv_out_side(h, layer.kernel, layer.stride, layer.padding)
        wo = _conv_out_side(w, layer.kernel, layer.stride, layer.padding)
        return n * layer.out_channels * layer.in_channels * layer.kernel ** 2 * ho * wo
    if isinstance(layer, DepthwiseConv2d):
        n, h, w = _spatial_of(shape, layer.channels)
        ho = _conv_out_side(h, layer.kernel, layer.stride, layer.padding)
        wo = _conv_out_side(w, layer.kernel, layer.stride, layer.padding)
        return n * layer.channels * layer.kernel ** 2 * ho * wo
    if isinstance(layer, P4Conv):
        n, h, w = _spatial_of(shape, layer.in_channels)
        # four orientation blocks, each a dense conv at the same spatial size
        return n * 4 * layer.out_channels * layer.in_channels * layer.kernel ** 2 * h * w
    if isinstance(layer, LayerNorm):
        return 0
    if isinstance(layer, FeedForward):
        t = _tokens_of(shape, layer.expand.in_features)
        return t * (count_macs(layer.expand, (1, layer.expand.in_features))
                    + count_macs(layer.project, (1, layer.project.in_features)))
    if isinstance(layer, StandardQkv):
        t = _tokens_of(shape, layer.q.in_features)
        return 3 * t * layer.q.in_features * layer.q.out_features
    if isinstance(layer, CommonQkv):
        t = _tokens_of(shape, layer.channels)
        return t * layer.channels ** 2 + 3 * layer.channels * layer.kernel ** 2 * t
    if isinstance(layer, MultiHeadSelfAttention):
        t = _tokens_of(shape, layer.channels)
        return (count_macs(layer.projection, (t, layer.channels))
                + attention_core_macs(t, layer.channels)
                + t * layer.channels ** 2)
    if isinstance(layer, GcLocalMix):
        n, h, w = _spatial_of(shape, layer.channels)
        inner = (n, layer.channels, h, w)
        return (count_macs(layer.depthwise, inner)
                + count_macs(layer.lift, inner)
                + count_macs(layer.project, (n, layer.channels // 4, h, w)))
    if isinstance(layer, MhsaMixer):
        n, h, w = _spatial_of(shape, layer.channels)
        return n * count_macs(layer.attention, (h * w, layer.channels))
    if isinstance(layer, MrlBlock):
        cfg = layer.config
        n, h, w = _spatial_of(shape, cfg.channels)
        sampled = (n, cfg.channels, h // cfg.region_size, w // cfg.region_size)
        t = sampled[2] * sampled[3]
        return (count_macs(layer.sampler, shape)
                + n * (count_macs(layer.attention.projection, (t, cfg.channels))
                       + attention_core_macs(t, cfg.channels)
                       + t * cfg.channels ** 2)
                + count_macs(layer.local, shape))
    if isinstance(layer, TransformerBlock):
        n, h, w = _spatial_of(shape, layer.norm1.dim)
        return (count_macs(layer.mixer, shape)
                + n * count_macs(layer.ffn, (h * w, layer.norm1.dim)))
    raise CostModelError(f"no MAC formula for {type(layer).__name__}")


# ----------------------------------------------------------------------
# whole-model enumeration


def _mixer_entries(prefix: str, spec: ModelSpec, st: StageSpec, side: int):
    d = st.channels
    entries = []
    if spec.mixer == "sa":
        t = side * side
        entries.append(LayerCost(f"{prefix}.mixer.attention.projection",
                                 GROUP_ATTENTION, 3 * d * d, 3 * t * d * d))
        entries.append(LayerCost(f"{prefix}.mixer.attention.core",
                                 GROUP_ATTENTION, 0, attention_core_macs(t, d)))
        entries.append(LayerCost(f"{prefix}.mixer.attention.out",
                                 GROUP_ATTENTION, d * d + d, t * d * d))
        return entries

    r = st.region_size
    g = side // r
    t = g * g
    if spec.sampler == "conv":
        sampler = LayerCost(f"{prefix}.mixer.sampler", GROUP_ATTENTION,
                            d * d * r * r + d, d * d * r * r * t)
    else:
        sampler = LayerCost(f"{prefix}.mixer.sampler", GROUP_ATTENTION,
                            d * r * r + d, d * r * r * t)
    entries.append(sampler)

    k = spec.local_kernel
    if spec.qkv_variant == "commonqkv":
        entries.append(LayerCost(f"{prefix}.mixer.attention.projection",
                                 GROUP_ATTENTION, d * d + 3 * d * k * k,
                                 t * d * d + 3 * d * k * k * t))
    else:
        entries.append(LayerCost(f"{prefix}.mixer.attention.projection",
                                 GROUP_ATTENTION, 3 * d * d, 3 * t * d * d))
    entries.append(LayerCost(f"{prefix}.mixer.attention.core",
                             GROUP_ATTENTION, 0, attention_core_macs(t, d)))
    entries.append(LayerCost(f"{prefix}.mixer.attention.out",
                             GROUP_ATTENTION, d * d + d, t * d * d))

    area = side * side
    if spec.local_mix == "gc-p4":
        base = d // 4
        entries.append(LayerCost(f"{prefix}.mixer.local.depthwise",
                                 GROUP_ATTENTION, d * k * k + d, d * k * k * area))
        entries.append(LayerCost(f"{prefix}.mixer.local.lift",
                                 GROUP_ATTENTION, base * d * k * k,
                                 4 * base * d * k * k * area))
        entries.append(LayerCost(f"{prefix}.mixer.local.project",
                                 GROUP_ATTENTION, d * base + d, d * base * area))
    else:
        entries.append(LayerCost(f"{prefix}.mixer.local", GROUP_ATTENTION,
                                 d * k * k + d, d * k * k * area))
    return entries


def enumerate_layer_costs(spec: ModelSpec, input_size: int | None = None) -> CostReport:
    """Closed-form cost of every piece of build_model(spec), in model order."""
    if input_size is not None and input_size != spec.input_size:
        spec = dataclasses.replace(spec, input_size=input_size)
    sizes = stage_grid_sizes(spec)

    entries = []
    c_in = spec.in_channels
    for i, st in enumerate(spec.stages):
        side = sizes[i]
        d = st.channels
        k = st.embed_kernel
        entries.append(LayerCost(f"stages.{i}.embed", GROUP_REST,
                                 d * c_in * k * k + d,
                                 d * c_in * k * k * side * side))
        entries.append(LayerCost(f"stages.{i}.norm", GROUP_REST, 2 * d, 0))
        area = side * side
        for j in range(st.blocks):
            prefix = f"stages.{i}.blocks.{j}"
            entries.append(LayerCost(f"{prefix}.norm1", GROUP_REST, 2 * d, 0))
            entries.extend(_mixer_entries(prefix, spec, st, side))
            entries.append(LayerCost(f"{prefix}.norm2", GROUP_REST, 2 * d, 0))
            entries.append(LayerCost(f"{prefix}.ffn", GROUP_REST,
                                     8 * d * d + 5 * d, 8 * d * d * area))
        c_in = d
    entries.append(LayerCost("final_norm", GROUP_REST, 2 * c_in, 0))
    entries.append(LayerCost("head", GROUP_REST,
                             c_in * spec.num_classes + spec.num_classes,
                             c_in * spec.num_classes))
    return CostReport(spec_name=spec.name, variant=_variant_label(spec),
                      input_size=spec.input_size, entries=tuple(entries))


def _variant_label(spec: ModelSpec) -> str:
    if spec.mixer == "sa":
        return "sa"
    return "cq+mrl" if spec.qkv_variant == "commonqkv" else "mrl"


def _variant_spec(spec: ModelSpec, variant: str) -> ModelSpec:
    if variant == "sa":
        return dataclasses.replace(spec, mixer="sa", qkv_variant="standard")
    if variant == "mrl":
        return dataclasses.replace(spec, mixer="mrl", qkv_variant="standard")
    if variant == "cq+mrl":
        return dataclasses.replace(spec, mixer="mrl", qkv_variant="commonqkv")
    raise CostModelError(f"unknown variant {variant!r}; known: {VARIANTS}")


@dataclass(frozen=True)
class VariantComparison:
    spec_name: str
    input_size: int
    reports: dict[str, CostReport]
    deltas: dict[str, dict[str, float]]


def _pct(after: int, before: int) -> float:
    if before == 0:
        raise CostModelError("cannot take a percentage against a zero baseline")
    return 100.0 * (after - before) / before


def compare_variants(spec: ModelSpec, input_size: int | None = None) -> VariantComparison:
    """The same network under SA, MRL, and CQ+MRL mixing modules."""
    reports = {v: enumerate_layer_costs(_variant_spec(spec, v), input_size)
               for v in VARIANTS}
    deltas = {}
    for after, before in (("mrl", "sa"), ("cq+mrl", "mrl")):
        a, b = reports[after], reports[before]
        deltas[f"{after} vs {before}"] = {
            "attention_module_flops_pct": _pct(a.group_flops(GROUP_ATTENTION),
                                               b.group_flops(GROUP_ATTENTION)),
            "attention_module_params_pct": _pct(a.group_params(GROUP_ATTENTION),
                                                b.group_params(GROUP_ATTENTION)),
            "total_flops_pct": _pct(a.total_flops, b.total_flops),
            "total_params_pct": _pct(a.total_params, b.total_params),
        }
    size = next(iter(reports.values())).input_size
    return VariantComparison(spec_name=spec.name, input_size=size,
                             reports=reports, deltas=deltas)


# ----------------------------------------------------------------------
# serialization


def write_cost_csv(report: CostReport, path) -> None:
    lines = ["layer,group,params,macs,flops"]
    for e in report.entries:
        lines.append(f"{e.name},{e.group},{e.params},{e.macs},{e.flops}")
    for group in (GROUP_ATTENTION, GROUP_REST):
        lines.append(f"TOTAL {group},{group},{report.group_params(group)},"
                     f"{report.group_macs(group)},{report.group_flops(group)}")
    lines.append(f"TOTAL,all,{report.total_params},{report.total_macs},"
                 f"{report.total_flops}")
    lines.append(f"# {ZERO_MAC_NOTE}; {FLOPS_NOTE}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _report_summary(report: CostReport) -> dict:
    return {
        "totals": {"params": report.total_params, "macs": report.total_macs,
                   "flops": report.total_flops},
        "groups": {
            group: {"params": report.group_params(group),
                    "macs": report.group_macs(group),
                    "flops": report.group_flops(group)}
            for group in (GROUP_ATTENTION, GROUP_REST)
        },
    }


def write_comparison_json(comparison: VariantComparison, path) -> None:
    payload = {
        "spec": comparison.spec_name,
        "input_size": comparison.input_size,
        "variants": {v: _report_summary(r) for v, r in comparison.reports.items()},
        "deltas": comparison.deltas,
        "notes": [ZERO_MAC_NOTE, FLOPS_NOTE],
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=False)
        f.write("\n")
