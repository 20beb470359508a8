"""Config-driven experiment assembly and the sweep/fold drivers."""

import math

import numpy as np
import pytest

from maxgain import (
    Adam,
    BatchNorm,
    ConfigError,
    Conv2d,
    Dense,
    Dropout,
    MaxPool2d,
    ReLU,
    ResidualBlock,
    SgdNesterov,
    build_dataset,
    build_fold_protocol,
    build_maxgain,
    build_network,
    build_optimizer,
    build_schedule,
    check_config,
    gamma_sweep,
    make_rng,
    network_to_text,
    parse_norm_order,
    run_config,
    run_folds,
)


def base_config(**overrides):
    config = {
        "seed": 3,
        "model": [
            {"type": "dense", "in": 2, "out": 12},
            {"type": "relu"},
            {"type": "dense", "in": 12, "out": 2},
        ],
        "optimizer": "adam",
        "lr": 0.01,
        "epochs": 4,
        "batch_size": 16,
        "dataset": {"type": "blobs", "n": 64, "seed": 5,
                    "centers": [[-2.0, -2.0], [2.0, 2.0]], "sd": 0.5},
    }
    config.update(overrides)
    return config


class TestConfigValidation:
    def test_accepts_the_base_config(self):
        check_config(base_config())

    def test_unknown_key_is_named(self):
        with pytest.raises(ConfigError, match="learning_rate"):
            check_config(base_config(learning_rate=0.1))

    def test_missing_required_key(self):
        config = base_config()
        del config["model"]
        with pytest.raises(ConfigError, match="model"):
            check_config(config)

    def test_unknown_optimizer(self):
        with pytest.raises(ConfigError):
            check_config(base_config(optimizer="adagrad"))

    def test_non_mapping(self):
        with pytest.raises(ConfigError):
            check_config([1, 2, 3])

    def test_parse_norm_order(self):
        assert parse_norm_order(1) == 1
        assert parse_norm_order(2) == 2
        assert parse_norm_order("inf") == math.inf
        assert parse_norm_order(math.inf) == math.inf
        with pytest.raises(ConfigError):
            parse_norm_order(3)
        with pytest.raises(ConfigError):
            parse_norm_order("2")


class TestBuilders:
    def test_stage_zoo(self):
        config = {
            "model": [
                {"type": "conv", "in": 1, "out": 4, "kernel": 3, "pad": 1},
                {"type": "batchnorm", "channels": 4},
                {"type": "relu"},
                {"type": "maxpool", "kernel": 2},
                {"type": "flatten"},
                {"type": "dropout", "rate": 0.5},
                {"type": "dense", "in": 16, "out": 2},
            ],
        }
        net = build_network(config, make_rng(0))
        assert isinstance(net.stages[0], Conv2d)
        assert net.stages[0].pad == 1
        assert isinstance(net.stages[1], BatchNorm)
        assert isinstance(net.stages[3], MaxPool2d)
        assert isinstance(net.stages[5], Dropout)
        assert net.stages[5].rate == 0.5
        assert isinstance(net.stages[6], Dense)
        assert net.stages[6].w.shape == (2, 16)

    def test_residual_stage(self):
        config = {
            "model": [{
                "type": "residual",
                "main": [{"type": "dense", "in": 4, "out": 4}, {"type": "relu"}],
                "shortcut": [{"type": "dense", "in": 4, "out": 4}],
            }],
        }
        net = build_network(config, make_rng(0))
        block = net.stages[0]
        assert isinstance(block, ResidualBlock)
        assert len(block.main) == 2
        assert len(block.shortcut) == 1
        assert len(net.learned_layers()) == 2

    def test_bad_stage_values_become_config_errors(self):
        with pytest.raises(ConfigError, match="dropout"):
            build_network({"model": [{"type": "dropout", "rate": 1.5}]}, make_rng(0))
        with pytest.raises(ConfigError, match="dense"):
            build_network({"model": [{"type": "dense", "in": 0, "out": 4}]}, make_rng(0))
        with pytest.raises(ConfigError, match="type"):
            build_network({"model": [{"in": 2, "out": 2}]}, make_rng(0))
        with pytest.raises(ConfigError, match="mystery"):
            build_network({"model": [{"type": "mystery"}]}, make_rng(0))

    def test_missing_stage_key_is_named(self):
        with pytest.raises(ConfigError, match="kernel"):
            build_network({"model": [{"type": "conv", "in": 1, "out": 2}]}, make_rng(0))

    def test_init_scheme_respected(self):
        config = {"model": [{"type": "dense", "in": 100, "out": 100}], "init": "glorot-uniform"}
        net = build_network(config, make_rng(1))
        bound = math.sqrt(6.0 / 200.0)
        assert np.abs(net.stages[0].w).max() <= bound
        with pytest.raises(ConfigError):
            build_network({"model": [{"type": "dense", "in": 2, "out": 2}],
                           "init": "unknown-scheme"}, make_rng(0))

    def test_dataset_builders(self):
        spirals = build_dataset({"type": "spirals", "n": 30, "seed": 1})
        assert spirals.x.shape == (30, 2)
        blobs = build_dataset({"type": "blobs", "n": 20, "seed": 1,
                               "centers": [[0.0, 0.0], [1.0, 1.0]]})
        assert blobs.class_count == 2
        with pytest.raises(ConfigError):
            build_dataset({"type": "parquet"})
        with pytest.raises(ConfigError):
            build_dataset({"type": "blobs", "n": 20})  # centers missing

    def test_dataset_seed_isolated_from_training_seed(self):
        a = build_dataset({"type": "spirals", "n": 25, "seed": 9})
        b = build_dataset({"type": "spirals", "n": 25, "seed": 9})
        np.testing.assert_array_equal(a.x, b.x)

    def test_optimizer_and_schedule(self):
        assert isinstance(build_optimizer(base_config()), Adam)
        sgd = build_optimizer(base_config(optimizer="sgd", momentum=0.5))
        assert isinstance(sgd, SgdNesterov)
        assert sgd.momentum == 0.5
        sched = build_schedule(base_config(schedule=[[3, 0.1]]))
        assert sched.lr_at(2) == 0.01
        assert sched.lr_at(3) == pytest.approx(0.001)
        with pytest.raises(ConfigError):
            build_schedule(base_config(schedule=[[0, 0.1]]))
        with pytest.raises(ConfigError):
            build_schedule(base_config(lr="fast"))

    def test_maxgain_builder(self):
        assert build_maxgain(base_config()) is None
        cfg = build_maxgain(base_config(maxgain={"gamma": 2.0, "p": "inf"}))
        assert cfg.gamma == 2.0
        assert cfg.p == math.inf
        with pytest.raises(ConfigError):
            build_maxgain(base_config(maxgain={"p": 2}))  # gamma missing
        with pytest.raises(ConfigError):
            build_maxgain(base_config(maxgain={"gamma": -1.0}))
        with pytest.raises(ConfigError):
            build_maxgain(base_config(maxgain={"gamma": 1.0, "p": 7}))


class TestRunConfig:
    def test_trains_and_scores(self):
        result = run_config(base_config(
            test_dataset={"type": "blobs", "n": 32, "seed": 6,
                          "centers": [[-2.0, -2.0], [2.0, 2.0]], "sd": 0.5}))
        assert result.train_accuracy == 1.0
        assert result.test_accuracy >= 0.9
        # gains are measured (at the default p=2) even without the constraint
        assert len(result.test_max_gains) == 2
        assert all(g > 0.0 for g in result.test_max_gains)
        assert len(result.ledger.records) == 8  # train + test rows per epoch

    def test_is_deterministic(self):
        a = run_config(base_config())
        b = run_config(base_config())
        assert network_to_text(a.net) == network_to_text(b.net)
        assert a.ledger.to_text() == b.ledger.to_text()

    def test_gamma_override_beats_the_config(self):
        config = base_config(maxgain={"gamma": 8.0, "p": 2},
                             test_dataset={"type": "blobs", "n": 32, "seed": 6,
                                           "centers": [[-2.0, -2.0], [2.0, 2.0]], "sd": 0.5})
        tight = run_config(config, gamma_override=0.05)
        loose = run_config(config, gamma_override=8.0)
        explicit = run_config(base_config(maxgain={"gamma": 0.05, "p": 2},
                                          test_dataset=config["test_dataset"]))
        assert network_to_text(tight.net) == network_to_text(explicit.net)
        assert network_to_text(tight.net) != network_to_text(loose.net)
        assert max(tight.test_max_gains) < max(loose.test_max_gains)

    def test_seed_override_changes_training_not_data(self):
        a = run_config(base_config(), seed_override=100)
        b = run_config(base_config(), seed_override=101)
        assert network_to_text(a.net) != network_to_text(b.net)

    def test_rejects_bad_config(self):
        with pytest.raises(ConfigError):
            run_config(base_config(typo_key=1))


class TestGammaSweep:
    def test_rows_sorted_and_complete(self):
        config = base_config(epochs=2,
                             maxgain={"gamma": 1.0, "p": 2},
                             test_dataset={"type": "blobs", "n": 32, "seed": 6,
                                           "centers": [[-2.0, -2.0], [2.0, 2.0]], "sd": 0.5})
        result = gamma_sweep(config, [4.0, 0.5, 1.0])
        gammas = [r.gamma for r in result.rows]
        assert gammas == [0.5, 1.0, 4.0]
        for row in result.rows:
            assert 0.0 <= row.train_accuracy <= 1.0
            assert 0.0 <= row.test_accuracy <= 1.0
            assert len(row.test_max_gains) == 2
        lines = result.to_lines()
        assert lines[0].startswith("gamma\ttrain_accuracy")
        assert len(lines) == 4

    def test_single_gamma_equals_direct_run(self):
        config = base_config(epochs=2,
                             maxgain={"gamma": 1.0, "p": 2},
                             test_dataset={"type": "blobs", "n": 32, "seed": 6,
                                           "centers": [[-2.0, -2.0], [2.0, 2.0]], "sd": 0.5})
        sweep = gamma_sweep(config, [1.0])
        direct = run_config(config)
        row = sweep.rows[0]
        assert row.train_accuracy == direct.train_accuracy
        assert row.test_loss == direct.test_loss
        assert tuple(direct.test_max_gains) == row.test_max_gains

    def test_parallel_matches_serial(self):
        config = base_config(epochs=2,
                             maxgain={"gamma": 1.0, "p": 2},
                             test_dataset={"type": "blobs", "n": 32, "seed": 6,
                                           "centers": [[-2.0, -2.0], [2.0, 2.0]], "sd": 0.5})
        serial = gamma_sweep(config, [0.5, 2.0], jobs=1)
        parallel = gamma_sweep(config, [0.5, 2.0], jobs=2)
        assert serial.to_text() == parallel.to_text()


class TestFolds:
    def fold_config(self):
        return base_config(
            epochs=2,
            dataset={"type": "blobs", "n": 100, "seed": 5,
                     "centers": [[-2.0, -2.0], [2.0, 2.0]], "sd": 0.5},
            folds={"k": 3, "train_per_fold": 20, "test_per_fold": 10, "seed": 11})

    def test_protocol_from_config(self):
        config = self.fold_config()
        proto = build_fold_protocol(config, build_dataset(config["dataset"]))
        assert len(proto.folds) == 3
        assert proto.n_instances == 100

    def test_run_folds_scores_every_fold(self):
        scores = run_folds(self.fold_config())
        assert [f for f, _ in scores.scores] == [0, 1, 2]
        assert all(0.0 <= acc <= 1.0 for _, acc in scores.scores)
        lines = scores.to_lines()
        assert lines[0] == "fold\taccuracy"
        assert len(lines) == 4

    def test_folds_deterministic_and_parallel_safe(self):
        serial = run_folds(self.fold_config())
        again = run_folds(self.fold_config())
        parallel = run_folds(self.fold_config(), jobs=2)
        assert serial.to_text() == again.to_text() == parallel.to_text()

    def test_missing_folds_section(self):
        with pytest.raises(ConfigError):
            run_folds(base_config())

    def test_explicit_protocol_is_used(self):
        config = self.fold_config()
        proto = build_fold_protocol(config, build_dataset(config["dataset"]))
        scores = run_folds(config, protocol=proto)
        assert run_folds(config).to_text() == scores.to_text()
