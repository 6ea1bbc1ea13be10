"""Dataset, checkpoint, training loop, and CLI behavior."""

import json
import struct

import numpy as np
import numpy.testing as npt
import pytest
from scipy.special import log_softmax

from mrl.checkpoint import (MAGIC, load_checkpoint, read_checkpoint,
                            save_checkpoint)
from mrl.cli import main
from mrl.data import (CLASSES, OFFSETS, THICKNESSES, DatasetSpec, render_bar,
                      rot90_with_labels, rotated_params, synth_dataset)
from mrl.errors import CheckpointError, ConfigError, NonFiniteError
from mrl.model import build_model, model_spec
from mrl.tensor import Tensor, grad_check
from mrl.train import (METRICS_HEADER, Adam, RunConfig, _batch_loss,
                       cross_entropy, evaluate, parse_run_config,
                       resolve_model_spec, train)

MICRO_DATASET = dict(train_count=64, test_count=16)


def micro_config(**kwargs):
    fields = dict(epochs=2, batch_size=16, seed=7,
                  dataset=DatasetSpec(**MICRO_DATASET))
    fields.update(kwargs)
    return RunConfig(**fields)


def tiny_model(seed=0, **overrides):
    merged = dict(in_channels=1, num_classes=4)
    merged.update(overrides)
    return build_model(model_spec("mrl-tiny", **merged), seed=seed)


# ----------------------------------------------------------------------
# dataset


class TestDatasetSpec:
    def test_defaults_valid(self):
        spec = DatasetSpec()
        assert spec.train_count == 2000 and spec.test_count == 500

    def test_unknown_kind(self):
        with pytest.raises(ConfigError, match="kind"):
            DatasetSpec(kind="mnist")

    def test_wrong_class_count(self):
        with pytest.raises(ConfigError, match="orientation classes"):
            DatasetSpec(classes=10)

    def test_unbalanced_count(self):
        with pytest.raises(ConfigError, match="divisible"):
            DatasetSpec(train_count=2001)
        with pytest.raises(ConfigError, match="divisible"):
            DatasetSpec(test_count=6, train_count=8)
        # 6 % 4 != 0 even though 6 > 4

    def test_negative_sigma(self):
        with pytest.raises(ConfigError, match="noise_sigma"):
            DatasetSpec(noise_sigma=-0.1)

    def test_tiny_image(self):
        with pytest.raises(ConfigError, match="image_size"):
            DatasetSpec(image_size=4)


class TestRenderBar:
    def test_binary_values(self):
        img = render_bar(32, 0, 1.5, 1.0)
        assert set(np.unique(img)) <= {0.0, 1.0}
        assert img.shape == (32, 32)
        assert img.sum() > 0

    def test_bad_label(self):
        with pytest.raises(ConfigError, match="label"):
            render_bar(32, 4, 0.0, 1.0)

    def test_rot90_closure_all_combinations(self):
        # a quarter turn of any rendered bar is exactly the rendering of
        # the cycled class with mapped nuisances, bit for bit
        for label in range(CLASSES):
            for offset in OFFSETS:
                for thickness in THICKNESSES:
                    img = render_bar(32, label, offset, thickness)
                    new_label, new_offset = rotated_params(label, offset)
                    want = render_bar(32, new_label, new_offset, thickness)
                    npt.assert_array_equal(np.rot90(img), want,
                                           err_msg=f"label {label} offset "
                                                   f"{offset} t {thickness}")

    def test_four_turns_identity(self):
        label, offset = 3, -2.5
        for _ in range(4):
            label, offset = rotated_params(label, offset)
        assert (label, offset) == (3, -2.5)

    def test_classes_are_distinct(self):
        imgs = [render_bar(32, c, 0.0, 1.0) for c in range(CLASSES)]
        for i in range(CLASSES):
            for j in range(i + 1, CLASSES):
                assert not np.array_equal(imgs[i], imgs[j])


class TestSynthDataset:
    def test_shapes_and_dtypes(self):
        spec = DatasetSpec(**MICRO_DATASET)
        (tx, ty), (ex, ey) = synth_dataset(spec, seed=0)
        assert tx.shape == (64, 1, 32, 32) and tx.dtype == np.float64
        assert ty.shape == (64,) and ty.dtype == np.int64
        assert ex.shape == (16, 1, 32, 32) and ey.shape == (16,)

    def test_exact_balance(self):
        (_, ty), (_, ey) = synth_dataset(DatasetSpec(**MICRO_DATASET), seed=3)
        npt.assert_array_equal(np.bincount(ty, minlength=4), [16] * 4)
        npt.assert_array_equal(np.bincount(ey, minlength=4), [4] * 4)

    def test_determinism(self):
        spec = DatasetSpec(**MICRO_DATASET)
        a = synth_dataset(spec, seed=5)
        b = synth_dataset(spec, seed=5)
        npt.assert_array_equal(a[0][0], b[0][0])
        npt.assert_array_equal(a[1][0], b[1][0])
        npt.assert_array_equal(a[0][1], b[0][1])
        c = synth_dataset(spec, seed=6)
        assert not np.array_equal(a[0][0], c[0][0])

    def test_noiseless_is_binary(self):
        spec = DatasetSpec(noise_sigma=0.0, **MICRO_DATASET)
        (tx, _), _ = synth_dataset(spec, seed=1)
        assert set(np.unique(tx)) <= {0.0, 1.0}

    def test_noise_changes_values(self):
        clean = synth_dataset(DatasetSpec(noise_sigma=0.0, **MICRO_DATASET), 1)
        noisy = synth_dataset(DatasetSpec(noise_sigma=0.1, **MICRO_DATASET), 1)
        assert not np.array_equal(clean[0][0], noisy[0][0])
        # same draws before the noise step, so labels agree
        npt.assert_array_equal(clean[0][1], noisy[0][1])


class TestRot90WithLabels:
    def test_label_cycle(self):
        labels = np.array([0, 1, 2, 3])
        _, got = rot90_with_labels(np.zeros((4, 1, 8, 8)), labels)
        npt.assert_array_equal(got, [2, 3, 0, 1])

    def test_images_quarter_turned(self):
        imgs = np.arange(2 * 1 * 4 * 4, dtype=np.float64).reshape(2, 1, 4, 4)
        turned, _ = rot90_with_labels(imgs, np.zeros(2, dtype=np.int64))
        npt.assert_array_equal(turned[0, 0], np.rot90(imgs[0, 0]))

    def test_two_turns_restore_labels(self):
        labels = np.array([0, 1, 2, 3])
        imgs = np.random.default_rng(0).normal(size=(4, 1, 8, 8))
        once = rot90_with_labels(*rot90_with_labels(imgs, labels))
        npt.assert_array_equal(once[1], labels)
        npt.assert_array_equal(once[0], np.rot90(imgs, k=2, axes=(2, 3)))


# ----------------------------------------------------------------------
# checkpoints


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        path = tmp_path / "a.bin"
        source = tiny_model(seed=0)
        save_checkpoint(source, path)
        target = tiny_model(seed=1)
        assert not np.array_equal(source.head.weight.data,
                                  target.head.weight.data)
        load_checkpoint(target, path)
        for (_, p), (_, q) in zip(source.named_parameters(),
                                  target.named_parameters()):
            npt.assert_array_equal(p.data, q.data)
        path2 = tmp_path / "b.bin"
        save_checkpoint(target, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_read_preserves_order_and_shapes(self, tmp_path):
        path = tmp_path / "a.bin"
        model = tiny_model()
        save_checkpoint(model, path)
        entries = read_checkpoint(path)
        names = [n for n, _ in model.named_parameters()]
        assert list(entries) == names
        for name, p in model.named_parameters():
            assert entries[name].shape == p.data.shape

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="cannot open"):
            read_checkpoint(tmp_path / "nope.bin")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="bad magic"):
            read_checkpoint(path)

    def test_short_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(MAGIC[:3])
        with pytest.raises(CheckpointError, match="bad magic"):
            read_checkpoint(path)

    def test_truncation_names_last_complete_entry(self, tmp_path):
        path = tmp_path / "a.bin"
        model = tiny_model()
        save_checkpoint(model, path)
        blob = path.read_bytes()
        names = [n for n, _ in model.named_parameters()]
        cut = tmp_path / "cut.bin"
        cut.write_bytes(blob[:-1])
        with pytest.raises(CheckpointError, match="truncated") as err:
            read_checkpoint(cut)
        # the last fully parsed entry is the second-to-last parameter
        assert names[-2] in str(err.value)

    def test_truncation_inside_header(self, tmp_path):
        path = tmp_path / "cut.bin"
        path.write_bytes(MAGIC + struct.pack("<I", 12) + b"abc")
        with pytest.raises(CheckpointError, match="at the header"):
            read_checkpoint(path)

    def test_duplicate_entry(self, tmp_path):
        entry = (struct.pack("<I", 1) + b"w" + struct.pack("<I", 1)
                 + struct.pack("<I", 2) + np.zeros(2).tobytes())
        path = tmp_path / "dup.bin"
        path.write_bytes(MAGIC + entry + entry)
        with pytest.raises(CheckpointError, match="duplicate"):
            read_checkpoint(path)

    def test_architecture_mismatch_names_parameters(self, tmp_path):
        path = tmp_path / "a.bin"
        save_checkpoint(tiny_model(), path)
        other = tiny_model(local_mix="gc-p4")
        with pytest.raises(CheckpointError, match="does not match"):
            load_checkpoint(other, path)

    def test_shape_mismatch_names_parameter(self, tmp_path):
        path = tmp_path / "a.bin"
        save_checkpoint(tiny_model(num_classes=4), path)
        other = tiny_model(num_classes=2)
        with pytest.raises(CheckpointError, match="shape mismatch for 'head.weight'"):
            load_checkpoint(other, path)


# ----------------------------------------------------------------------
# loss and optimizer


class TestCrossEntropy:
    def test_matches_log_softmax_oracle(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(8, 5))
        labels = rng.integers(0, 5, size=8)
        got = cross_entropy(Tensor(logits), labels)
        want = -log_softmax(logits, axis=-1)[np.arange(8), labels].mean()
        npt.assert_allclose(float(got.data), want, rtol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 4, size=6)
        x = Tensor(rng.normal(size=(6, 4)))
        assert grad_check(lambda t: cross_entropy(t, labels), x) < 1e-9

    def test_shift_invariance(self):
        # adding a per-row constant to the logits leaves the loss unchanged
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(4, 3))
        labels = np.array([0, 2, 1, 1])
        a = float(cross_entropy(Tensor(logits), labels).data)
        b = float(cross_entropy(Tensor(logits + 100.0), labels).data)
        npt.assert_allclose(a, b, rtol=1e-9)

    def test_perfect_prediction_low_loss(self):
        logits = np.full((4, 4), -20.0)
        logits[np.arange(4), np.arange(4)] = 20.0
        loss = float(cross_entropy(Tensor(logits), np.arange(4)).data)
        assert loss < 1e-8


class TestAdam:
    def test_first_step_closed_form(self):
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        g = np.array([0.5, -0.25, 0.0])
        p.grad = g.copy()
        opt = Adam([p], lr=0.1)
        before = p.data.copy()
        opt.step()
        # bias correction makes the first step lr * g / (|g| + eps)
        want = before - 0.1 * g / (np.abs(g) + 1e-8)
        npt.assert_allclose(p.data, want, rtol=0, atol=1e-15)

    def test_quadratic_descends(self):
        p = Tensor(np.array([5.0]), requires_grad=True)
        opt = Adam([p], lr=0.1)
        values = []
        for _ in range(200):
            values.append(float(p.data[0] ** 2))
            p.grad = 2.0 * p.data
            opt.step()
        assert values[-1] < 1e-2 < values[0]

    def test_none_grad_skipped(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        q = Tensor(np.array([2.0]), requires_grad=True)
        q.grad = np.array([1.0])
        opt = Adam([p, q], lr=0.1)
        opt.step()
        assert p.data[0] == 1.0
        assert q.data[0] != 2.0


# ----------------------------------------------------------------------
# run config


class TestParseRunConfig:
    def test_empty_gives_defaults(self):
        assert parse_run_config({}) == RunConfig()

    def test_unknown_top_key(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            parse_run_config({"learning_rate": 0.1})

    def test_unknown_optimizer_key(self):
        with pytest.raises(ConfigError, match="unknown optimizer keys"):
            parse_run_config({"optimizer": {"momentum": 0.9}})

    def test_unknown_optimizer_kind(self):
        with pytest.raises(ConfigError, match="optimizer kind"):
            parse_run_config({"optimizer": {"kind": "sgd"}})

    def test_bad_dataset_key(self):
        with pytest.raises(ConfigError, match="bad dataset config"):
            parse_run_config({"dataset": {"n_train": 100}})

    def test_dataset_must_be_object(self):
        with pytest.raises(ConfigError, match="dataset must be"):
            parse_run_config({"dataset": [1, 2]})

    def test_config_must_be_object(self):
        with pytest.raises(ConfigError, match="JSON object"):
            parse_run_config([1])

    def test_model_name_and_overrides_split(self):
        config = parse_run_config({"model": {"name": "mrl-tiny", "head_dim": 8}})
        assert config.model_name == "mrl-tiny"
        assert config.model_overrides == {"head_dim": 8}

    def test_validation_bounds(self):
        with pytest.raises(ConfigError, match="lr"):
            RunConfig(lr=0.0)
        with pytest.raises(ConfigError, match="shards"):
            RunConfig(shards=64, batch_size=32)
        with pytest.raises(ConfigError, match="epochs"):
            RunConfig(epochs=0)

    def test_resolve_model_spec_adapts_to_dataset(self):
        spec = resolve_model_spec(micro_config())
        assert spec.in_channels == 1
        assert spec.num_classes == 4
        assert spec.input_size == 32

    def test_resolve_model_spec_user_override_wins(self):
        config = micro_config(model_overrides={"sampler": "depthwise"})
        assert resolve_model_spec(config).sampler == "depthwise"


# ----------------------------------------------------------------------
# training loop


class TestTrainLoop:
    def test_deterministic_across_runs(self, tmp_path):
        config = micro_config()
        a = train(config, out_dir=tmp_path / "a")
        b = train(config, out_dir=tmp_path / "b")
        assert a.metrics_rows == b.metrics_rows
        for (_, p), (_, q) in zip(a.model.named_parameters(),
                                  b.model.named_parameters()):
            npt.assert_array_equal(p.data, q.data)
        assert ((tmp_path / "a" / "metrics.csv").read_bytes()
                == (tmp_path / "b" / "metrics.csv").read_bytes())
        assert ((tmp_path / "a" / "model.bin").read_bytes()
                == (tmp_path / "b" / "model.bin").read_bytes())

    def test_loss_decreases(self):
        result = train(micro_config(epochs=3))
        assert result.epoch_losses[-1] < result.epoch_losses[0]

    def test_metrics_format(self):
        result = train(micro_config())
        assert result.metrics_rows[0] == METRICS_HEADER
        assert len(result.metrics_rows) == 1 + 2
        for epoch, row in enumerate(result.metrics_rows[1:], start=1):
            cols = row.split(",")
            assert len(cols) == 4
            assert int(cols[0]) == epoch
            assert 0.0 <= float(cols[2]) <= 1.0
            assert cols[3] == "0.000"
        # stdout log lines carry the real timings instead
        assert all("s)" in line for line in result.log_lines)

    def test_record_timing_fills_wall_column(self):
        result = train(micro_config(epochs=1, record_timing=True))
        wall = result.metrics_rows[1].split(",")[3]
        assert float(wall) > 0.0

    def test_sharded_gradients_match_unsharded(self):
        (tx, ty), _ = synth_dataset(DatasetSpec(**MICRO_DATASET), seed=0)
        whole = tiny_model(seed=0)
        split = tiny_model(seed=0)
        loss_a = _batch_loss(whole, tx[:16], ty[:16], shards=1, epoch=1, step=0)
        loss_b = _batch_loss(split, tx[:16], ty[:16], shards=3, epoch=1, step=0)
        npt.assert_allclose(loss_b, loss_a, rtol=1e-12)
        for (name, p), (_, q) in zip(whole.named_parameters(),
                                     split.named_parameters()):
            npt.assert_allclose(q.grad, p.grad, rtol=1e-9, atol=1e-12,
                                err_msg=name)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_names_epoch_and_step(self):
        model = tiny_model()
        model.head.weight.data[0, 0] = np.inf
        (tx, ty), _ = synth_dataset(DatasetSpec(**MICRO_DATASET), seed=0)
        with pytest.raises(NonFiniteError, match="epoch 3 step 7"):
            _batch_loss(model, tx[:8], ty[:8], shards=1, epoch=3, step=7)


class TestEvaluate:
    def test_range_and_batching_consistency(self):
        result = train(micro_config())
        _, (ex, ey) = synth_dataset(micro_config().dataset, seed=7)
        full = evaluate(result.model, ex, ey, batch_size=64)
        small = evaluate(result.model, ex, ey, batch_size=3)
        assert 0.0 <= full <= 1.0
        assert full == small

    def test_rot90_transform_equals_manual_rotation(self):
        result = train(micro_config())
        _, (ex, ey) = synth_dataset(micro_config().dataset, seed=7)
        via_transform = evaluate(result.model, ex, ey, transform="rot90")
        rx, ry = rot90_with_labels(ex, ey)
        manual = evaluate(result.model, rx, ry)
        assert via_transform == manual

    def test_unknown_transform(self):
        model = tiny_model()
        with pytest.raises(ConfigError, match="transform"):
            evaluate(model, np.zeros((4, 1, 32, 32)), np.zeros(4, dtype=np.int64),
                     transform="flip")


# ----------------------------------------------------------------------
# CLI


def write_micro_config(path, **extra):
    payload = {"epochs": 1, "batch_size": 16, "seed": 7,
               "dataset": MICRO_DATASET}
    payload.update(extra)
    path.write_text(json.dumps(payload))
    return str(path)


class TestCli:
    def test_cost_writes_reports(self, tmp_path, capsys):
        assert main(["cost", "--spec", "mrl-tiny", "--out", str(tmp_path)]) == 0
        for name in ("cost_sa.csv", "cost_mrl.csv", "cost_cq_mrl.csv",
                     "cost_compare.json"):
            assert (tmp_path / name).exists(), name
        out = capsys.readouterr().out
        assert "attention-module" in out

    def test_train_then_eval(self, tmp_path, capsys):
        config = write_micro_config(tmp_path / "run.json")
        out_dir = tmp_path / "run"
        assert main(["train", "--config", config, "--out", str(out_dir)]) == 0
        assert (out_dir / "metrics.csv").exists()
        assert (out_dir / "model.bin").exists()
        capsys.readouterr()
        code = main(["eval", "--config", config,
                     "--checkpoint", str(out_dir / "model.bin")])
        assert code == 0
        assert "accuracy (identity):" in capsys.readouterr().out
        code = main(["eval", "--config", config, "--transform", "rot90",
                     "--checkpoint", str(out_dir / "model.bin")])
        assert code == 0
        assert "accuracy (rot90):" in capsys.readouterr().out

    def test_train_flag_overrides(self, tmp_path):
        config = write_micro_config(tmp_path / "run.json")
        out_dir = tmp_path / "run"
        assert main(["train", "--config", config, "--epochs", "2",
                     "--out", str(out_dir)]) == 0
        rows = (out_dir / "metrics.csv").read_text().strip().splitlines()
        assert len(rows) == 1 + 2

    def test_eval_missing_checkpoint_exits_1(self, tmp_path, capsys):
        config = write_micro_config(tmp_path / "run.json")
        code = main(["eval", "--config", config,
                     "--checkpoint", str(tmp_path / "nope.bin")])
        assert code == 1
        assert "checkpoint error" in capsys.readouterr().err

    def test_malformed_config_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["train", "--config", str(bad)]) == 2
        assert "config error" in capsys.readouterr().err

    def test_unknown_config_key_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"learning_rate": 0.1}))
        assert main(["train", "--config", str(bad)]) == 2

    def test_unknown_model_exits_2(self, tmp_path, capsys):
        config = write_micro_config(tmp_path / "run.json")
        code = main(["train", "--config", config, "--spec", "mrl-huge",
                     "--out", str(tmp_path / "x")])
        assert code == 2
        assert "unknown model" in capsys.readouterr().err

    def test_unknown_command_exits_2(self):
        with pytest.raises(SystemExit) as err:
            main(["frobnicate"])
        assert err.value.code == 2

    def test_gradcheck_single_seed_passes(self, capsys):
        assert main(["gradcheck", "--seeds", "1"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out
        assert "all checks passed" in out

    def test_equivariance_passes(self, capsys):
        assert main(["equivariance", "--seeds", "2"]) == 0
        assert "all checks passed" in capsys.readouterr().out
