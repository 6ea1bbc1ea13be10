"""Training and evaluation at desk scale.

Adam on softmax cross-entropy over the oriented-bars dataset. Everything
downstream of (config, seed) is deterministic: parameter init, data,
batch order, and therefore the metrics file and checkpoint bytes. The
wall_seconds metrics column is written as 0.000 unless record_timing is
set, because real timings would break byte-identical reruns; actual
epoch times always go to stdout via the returned log lines.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import save_checkpoint
from .data import DatasetSpec, rot90_with_labels, synth_dataset
from .errors import ConfigError, NonFiniteError
from .layers import Module
from .model import ClassificationModel, ModelSpec, build_model, model_spec
from .tensor import Tensor, no_grad

METRICS_HEADER = "epoch,train_loss,test_acc,wall_seconds"


# ----------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; labels are integer class ids."""
    n, k = logits.shape
    shift = Tensor(np.max(logits.data, axis=-1, keepdims=True))
    lse = (logits - shift).exp().sum(axis=-1, keepdims=True).log() + shift
    log_probs = logits - lse
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    return -(log_probs * Tensor(onehot)).sum() / float(n)


# ----------------------------------------------------------------------
# optimizer


class Adam(object):
    """Adam with bias correction; state keyed by parameter identity."""

    def __init__(self, params, lr: float = 3e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ----------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    model_name: str = "mrl-tiny"
    model_overrides: dict = field(default_factory=dict)
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 5
    batch_size: int = 32
    seed: int = 42
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    shards: int = 1
    record_timing: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.shards < 1 or self.shards > self.batch_size:
            raise ConfigError(
                f"shards must be in 1..batch_size, got {self.shards}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")


_OPTIMIZER_KEYS = {"kind", "lr", "beta1", "beta2", "eps"}
_TOP_KEYS = {"model", "optimizer", "epochs", "batch_size", "seed", "dataset",
             "shards", "record_timing"}


def parse_run_config(raw: dict) -> RunConfig:
    """Strict parse of the JSON config dictionary; unknown keys are errors."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    model = dict(raw.get("model", {}))
    model_name = model.pop("name", "mrl-tiny")

    opt = dict(raw.get("optimizer", {}))
    bad = set(opt) - _OPTIMIZER_KEYS
    if bad:
        raise ConfigError(f"unknown optimizer keys: {sorted(bad)}")
    kind = opt.pop("kind", "adam")
    if kind != "adam":
        raise ConfigError(f"unknown optimizer kind: {kind!r}")

    dataset_raw = raw.get("dataset", {})
    if not isinstance(dataset_raw, dict):
        raise ConfigError("dataset must be a JSON object")
    try:
        dataset = DatasetSpec(**dataset_raw)
    except TypeError as exc:
        raise ConfigError(f"bad dataset config: {exc}") from None

    try:
        return RunConfig(
            model_name=model_name,
            model_overrides=model,
            lr=opt.get("lr", 3e-3),
            beta1=opt.get("beta1", 0.9),
            beta2=opt.get("beta2", 0.999),
            adam_eps=opt.get("eps", 1e-8),
            epochs=raw.get("epochs", 5),
            batch_size=raw.get("batch_size", 32),
            seed=raw.get("seed", 42),
            dataset=dataset,
            shards=raw.get("shards", 1),
            record_timing=raw.get("record_timing", False),
        )
    except TypeError as exc:
        raise ConfigError(f"bad config: {exc}") from None


def resolve_model_spec(config: RunConfig) -> ModelSpec:
    """The named spec adapted to the dataset, then user overrides on top."""
    overrides = {
        "in_channels": 1,
        "num_classes": config.dataset.classes,
        "input_size": config.dataset.image_size,
    }
    overrides.update(config.model_overrides)
    return model_spec(config.model_name, **overrides)


# ----------------------------------------------------------------------
# evaluation


def evaluate(model: ClassificationModel, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 64, transform: str = "identity") -> float:
    """Deterministic accuracy in [0, 1]; transform rot90 quarter-turns the
    images and cycles the orientation labels."""
    if transform == "rot90":
        images, labels = rot90_with_labels(images, labels, model.spec.num_classes)
    elif transform != "identity":
        raise ConfigError(f"unknown transform: {transform!r}")
    hits = 0
    with no_grad():
        for start in range(0, len(images), batch_size):
            batch = Tensor(images[start:start + batch_size])
            logits = model(batch)
            hits += int((np.argmax(logits.data, axis=1)
                         == labels[start:start + batch_size]).sum())
    return hits / len(images)


# ----------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: ClassificationModel
    metrics_rows: list[str]
    log_lines: list[str]
    epoch_losses: list[float]
    final_test_acc: float


def _batch_loss(model: Module, images: np.ndarray, labels: np.ndarray,
                shards: int, epoch: int, step: int) -> float:
    """Forward/backward over the batch, accumulating parameter gradients.

    With shards > 1 the batch is split; each shard runs its own tape and
    leaf gradients accumulate in fixed shard order, weighted so the sum
    equals the batch-mean gradient.
    """
    n = len(images)
    bounds = [round(i * n / shards) for i in range(shards + 1)]
    total = 0.0
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if lo == hi:
            continue
        shard_loss = cross_entropy(model(Tensor(images[lo:hi])), labels[lo:hi])
        value = float(shard_loss.data)
        if not np.isfinite(value):
            raise NonFiniteError(
                f"non-finite loss at epoch {epoch} step {step}")
        weight = (hi - lo) / n
        (shard_loss * weight).backward()
        total += value * weight
    return total


def train(config: RunConfig, out_dir=None) -> TrainResult:
    """Run the full training loop; optionally write metrics + checkpoint.

    Writes <out_dir>/metrics.csv and <out_dir>/model.bin when out_dir is
    given. Raises NonFiniteError (naming epoch and step) the moment a loss
    stops being finite.
    """
    spec = resolve_model_spec(config)
    (train_x, train_y), (test_x, test_y) = synth_dataset(config.dataset, config.seed)
    model = build_model(spec, seed=config.seed)
    optimizer = Adam(model.parameters(), lr=config.lr, beta1=config.beta1,
                     beta2=config.beta2, eps=config.adam_eps)
    order_rng = np.random.Generator(np.random.PCG64(config.seed + 1))

    metrics_rows = [METRICS_HEADER]
    log_lines = []
    epoch_losses = []
    acc = 0.0
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = order_rng.permutation(len(train_x))
        running, seen = 0.0, 0
        for step, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            model.zero_grad()
            loss = _batch_loss(model, train_x[idx], train_y[idx],
                               config.shards, epoch, step)
            optimizer.step()
            running += loss * len(idx)
            seen += len(idx)
        epoch_loss = running / seen
        epoch_losses.append(epoch_loss)
        acc = evaluate(model, test_x, test_y)
        elapsed = time.perf_counter() - started
        recorded = elapsed if config.record_timing else 0.0
        metrics_rows.append(f"{epoch},{epoch_loss:.6f},{acc:.4f},{recorded:.3f}")
        log_lines.append(
            f"epoch {epoch}: train_loss {epoch_loss:.4f} test_acc {acc:.4f} "
            f"({elapsed:.1f}s)")

    if out_dir is not None:
        import os
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.csv"), "w") as f:
            f.write("\n".join(metrics_rows) + "\n")
        save_checkpoint(model, os.path.join(out_dir, "model.bin"))
    return TrainResult(model=model, metrics_rows=metrics_rows,
                       log_lines=log_lines, epoch_losses=epoch_losses,
                       final_test_acc=acc)
