"""Optimizer, metrics, checkpointing, and training-loop determinism."""

import math

import numpy as np
import pytest

from frmil.autodiff import Tensor
from frmil.bagdata import (
    SingleClassError,
    SyntheticSpec,
    generate_synthetic,
    split_ids,
    write_store,
)
from frmil.model import init_params
from frmil.training import (
    AdamState,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    TrainConfig,
    adam_step,
    auc,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
    train_comparator,
    write_metrics_csv,
)


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        t = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
        named = {"w": t}
        state = AdamState.for_params(named)
        before = t.data.copy()
        for _ in range(5):
            adam_step(named, {"w": np.zeros(2, np.float32)}, state, lr=0.1)
        np.testing.assert_array_equal(t.data, before)

    def test_first_step_is_signed_lr(self):
        # after bias correction the first update is lr * g / (|g| + eps)
        t = Tensor(np.array([1.0, 1.0], dtype=np.float64), requires_grad=True)
        named = {"w": t}
        state = AdamState.for_params(named)
        g = np.array([0.3, -7.0])
        adam_step(named, {"w": g}, state, lr=0.01)
        np.testing.assert_allclose(t.data, 1.0 - 0.01 * np.sign(g), atol=1e-6)

    def test_quadratic_convergence_matches_reference_loop(self):
        # minimize theta^2 from theta=1 with lr 0.1 for 200 steps
        t = Tensor(np.array([1.0], dtype=np.float64), requires_grad=True)
        named = {"w": t}
        state = AdamState.for_params(named)
        # independent reference implementation
        theta, m, v = 1.0, 0.0, 0.0
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.1
        for step in range(1, 201):
            g = 2.0 * t.data[0]
            adam_step(named, {"w": np.array([g])}, state, lr=lr)
            g_ref = 2.0 * theta
            m = b1 * m + (1 - b1) * g_ref
            v = b2 * v + (1 - b2) * g_ref * g_ref
            theta -= lr * (m / (1 - b1 ** step)) / (math.sqrt(v / (1 - b2 ** step)) + eps)
            assert t.data[0] == pytest.approx(theta, abs=1e-12)
        assert abs(t.data[0]) < 0.05

    def test_non_finite_gradient_aborts_with_name(self):
        t = Tensor(np.ones(2, np.float32), requires_grad=True)
        named = {"spike": t}
        state = AdamState.for_params(named)
        from frmil.training import TrainingError
        with pytest.raises(TrainingError, match="spike"):
            adam_step(named, {"spike": np.array([np.nan, 0.0])}, state, lr=0.1)


class TestAuc:
    def test_hand_case(self):
        # concordant pairs 3 of 4
        assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)

    def test_perfect_separation(self):
        assert auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0

    def test_single_pair(self):
        assert auc([0.7, 0.3], [1, 0]) == 1.0

    def test_all_ties_half(self):
        assert auc([0.5] * 6, [0, 1, 0, 1, 0, 1]) == pytest.approx(0.5)

    def test_score_inversion_symmetry(self):
        rng = np.random.default_rng(0)
        s = rng.random(30)
        y = (rng.random(30) < 0.4).astype(int)
        if y.sum() in (0, 30):
            y[0] = 1 - y[0]
        assert auc(1 - s, y) == pytest.approx(1 - auc(s, y))

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(2, 30))
            scores = np.round(rng.random(n), 2)  # rounding forces ties
            labels = (rng.random(n) < 0.5).astype(int)
            if labels.sum() == 0:
                labels[0] = 1
            if labels.sum() == n:
                labels[0] = 0
            pos = scores[labels == 1]
            neg = scores[labels == 0]
            wins = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg)
            expected = wins / (len(pos) * len(neg))
            assert auc(scores, labels) == pytest.approx(expected, abs=1e-12)

    def test_single_class_raises(self):
        with pytest.raises(SingleClassError):
            auc([0.1, 0.2], [1, 1])


@pytest.fixture(scope="module")
def tiny_store(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_store")
    spec = SyntheticSpec(n_bags=24, dim=8, bag_min=3, bag_max=8,
                         witness_rate=0.25, separation=2.0, seed=5)
    store = write_store(generate_synthetic(spec), root)
    split = split_ids(store.labels(), (0.5, 0.25, 0.25), seed=5)
    return store, split


def tiny_config(**kw):
    base = dict(tau=20.0, gammas=(0.33, 0.33, 0.33), lr=1e-3, epochs=3,
                heads=2, dropout=0.2, seed=7)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainLoop:
    def test_deterministic_metrics_bytes(self, tiny_store, tmp_path):
        store, split = tiny_store
        paths = []
        for run in range(2):
            result = train(store, split, tiny_config())
            p = tmp_path / f"metrics{run}.csv"
            write_metrics_csv(result.history, p)
            paths.append(p)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_seed_changes_metrics(self, tiny_store, tmp_path):
        store, split = tiny_store
        a = train(store, split, tiny_config(seed=7))
        b = train(store, split, tiny_config(seed=8))
        assert a.history != b.history

    def test_zero_weights_leave_params_at_init(self, tiny_store):
        store, split = tiny_store
        config = tiny_config(gammas=(0.0, 0.0, 0.0), epochs=2)
        result = train(store, split, config)
        fresh = init_params(store.dim, config.heads, config.seed)
        for name, t in result.params.named().items():
            np.testing.assert_array_equal(t.data, fresh.named()[name].data)

    def test_disabled_losses_log_zero_columns(self, tiny_store):
        store, split = tiny_store
        config = tiny_config(use_max_loss=False, use_fm_loss=False, epochs=2)
        result = train(store, split, config)
        train_rows = [r for r in result.history if r["split"] == "train"]
        assert all(r["loss_max"] == 0.0 and r["loss_fm"] == 0.0
                   for r in train_rows)
        assert all(r["loss"] == pytest.approx(r["loss_bag"]) for r in train_rows)

    def test_losses_finite_every_epoch(self, tiny_store):
        store, split = tiny_store
        result = train(store, split, tiny_config(epochs=4))
        for row in result.history:
            assert np.isfinite(row["loss"])
        assert result.params.all_finite()

    def test_best_val_checkpoint_tracked(self, tiny_store):
        store, split = tiny_store
        result = train(store, split, tiny_config(epochs=3))
        assert result.best_val_auc is not None
        assert result.best_params is not None
        assert 0 <= result.best_epoch < 3

    def test_single_class_train_split_rejected(self, tiny_store):
        store, split = tiny_store
        pos_only = [i for i in split["train"] if store.bag(i).label == 1]
        with pytest.raises(SingleClassError):
            train(store, {"train": pos_only, "val": []}, tiny_config())

    def test_comparator_training_runs(self, tiny_store):
        store, split = tiny_store
        for kind in ("mean_pool", "max_pool"):
            result = train_comparator(store, split, tiny_config(epochs=2), kind)
            assert result.params.all_finite()
            assert len(result.history) == 2


class TestEvaluate:
    def test_report_fields(self, tiny_store):
        store, split = tiny_store
        params = init_params(store.dim, 2, seed=0)
        report = evaluate(store, split["test"], params, split="test")
        assert report.split == "test"
        assert 0.0 <= report.accuracy <= 1.0
        assert report.auc is None or 0.0 <= report.auc <= 1.0
        assert len(report.rows) == len(split["test"])
        assert np.isfinite(report.mean_bce)

    def test_single_class_auc_is_none(self, tiny_store):
        store, split = tiny_store
        params = init_params(store.dim, 2, seed=0)
        pos_only = [i for i in split["test"] if store.bag(i).label == 1]
        report = evaluate(store, pos_only, params)
        assert report.auc is None
        assert 0.0 <= report.accuracy <= 1.0

    def test_empty_ids_rejected(self, tiny_store):
        store, _ = tiny_store
        params = init_params(store.dim, 2, seed=0)
        with pytest.raises(ValueError):
            evaluate(store, [], params)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tiny_store, tmp_path):
        store, split = tiny_store
        config = tiny_config(epochs=1)
        result = train(store, split, config)
        path = tmp_path / "model.ckpt"
        save_checkpoint(result.params, config, path)
        loaded, cfg = load_checkpoint(path)
        for name, t in result.params.named().items():
            assert t.data.tobytes() == loaded.named()[name].data.tobytes()
        assert cfg.to_dict() == config.to_dict()

    def test_corrupted_magic(self, tiny_store, tmp_path):
        store, split = tiny_store
        config = tiny_config(epochs=1)
        result = train(store, split, config)
        path = tmp_path / "model.ckpt"
        save_checkpoint(result.params, config, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointMagicError):
            load_checkpoint(path)

    def test_bad_version(self, tiny_store, tmp_path):
        store, split = tiny_store
        config = tiny_config(epochs=1)
        save_checkpoint(train(store, split, config).params, config,
                        tmp_path / "m.ckpt")
        raw = bytearray((tmp_path / "m.ckpt").read_bytes())
        raw[4] = 99
        (tmp_path / "m.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_truncation_detected(self, tiny_store, tmp_path):
        store, split = tiny_store
        config = tiny_config(epochs=1)
        path = tmp_path / "m.ckpt"
        save_checkpoint(train(store, split, config).params, config, path)
        data = path.read_bytes()
        path.write_bytes(data[:-10])
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(path)

    def test_shape_tamper_detected(self, tiny_store, tmp_path):
        import json as json_mod
        import struct
        store, split = tiny_store
        config = tiny_config(epochs=1)
        path = tmp_path / "m.ckpt"
        save_checkpoint(train(store, split, config).params, config, path)
        data = path.read_bytes()
        hlen = struct.unpack("<I", data[5:9])[0]
        header = json_mod.loads(data[9:9 + hlen])
        header["params"][0]["shape"] = [1, 1]
        new_header = json_mod.dumps(header).encode()
        path.write_bytes(data[:5] + struct.pack("<I", len(new_header))
                         + new_header + data[9 + hlen:])
        with pytest.raises(CheckpointShapeError):
            load_checkpoint(path)

    def test_load_then_evaluate_identical(self, tiny_store, tmp_path):
        store, split = tiny_store
        config = tiny_config(epochs=2)
        result = train(store, split, config)
        before = evaluate(store, split["test"], result.params,
                          pem_residual=config.pem_residual)
        path = tmp_path / "m.ckpt"
        save_checkpoint(result.params, config, path)
        loaded, cfg = load_checkpoint(path)
        after = evaluate(store, split["test"], loaded,
                         pem_residual=cfg.pem_residual)
        assert before.rows == after.rows
        assert before.accuracy == after.accuracy and before.auc == after.auc


class TestTrainConfig:
    def test_round_trip(self):
        cfg = tiny_config()
        again = TrainConfig.from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            TrainConfig.from_dict({"learning_rate": 1e-3})

    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.lr == 1e-4
        assert cfg.epochs == 100
        assert cfg.heads == 8
        assert cfg.dropout == 0.2
        assert cfg.gammas == (0.33, 0.33, 0.33)

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            TrainConfig(tau=-1.0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(dropout=1.0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(dim=10, heads=3).validate()
