"""MRL: regional-attention mixing blocks with a from-scratch autodiff core.

Importing this package pins BLAS thread pools to a single thread (unless
the variables are already set) before numpy first loads, so training and
suite outputs are byte-stable across machines. Set the variables yourself
beforehand to opt out.
"""

import os as _os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from .block import (CommonQkv, GcLocalMix, MhsaMixer, MrlBlock, MrlConfig,
                    TransformerBlock, grid_to_tokens, mrl_forward,
                    reassemble_regions, region_partition, region_sample,
                    regional_mix, tokens_to_grid, upscale_sum)
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .cost import (CostReport, LayerCost, VariantComparison, attention_core_macs,
                   compare_variants, count_macs, count_params,
                   enumerate_layer_costs, write_comparison_json, write_cost_csv)
from .data import DatasetSpec, render_bar, rot90_with_labels, synth_dataset
from .errors import (CheckpointError, ConfigError, CostModelError, GraphError,
                     MrlError, NonFiniteError, OracleError, ShapeError)
from .layers import (Conv2d, DepthwiseConv2d, FeedForward, LayerNorm, Linear,
                     Module, MultiHeadSelfAttention, P4Conv, StandardQkv,
                     softmax_lastdim)
from .model import (ClassificationModel, ModelSpec, StageSpec, build_model,
                    model_names, model_spec, stage_grid_sizes)
from .suites import SuiteRow, equivariance_suite, gradcheck_suite
from .tensor import (Tensor, concat, grad_check, grad_check_targets, no_grad,
                     pad2d, slice_axis)
from .train import (Adam, RunConfig, TrainResult, cross_entropy, evaluate,
                    parse_run_config, resolve_model_spec, train)

__version__ = "0.1.0"
