"""Experiment assembly: config dicts to networks, datasets, and training runs.

The config is a plain dict (the CLI reads it from JSON):

    {
      "seed": 7,
      "model": [{"type": "dense", "in": 2, "out": 64}, {"type": "relu"}, ...],
      "init": "he-normal",
      "optimizer": "adam",                  # or "sgd"
      "lr": 1e-3,
      "momentum": 0.9,                      # sgd only
      "schedule": [[100, 0.1]],             # optional (epoch, factor) drops
      "epochs": 200,
      "batch_size": 64,
      "maxgain": {"gamma": 2.0, "p": 2},    # optional; p in {1, 2, "inf"}
      "dataset": {"type": "spirals", "n": 2000, "seed": 7},
      "test_dataset": {...},                # optional
      "augment": {"flip": true, "pad": 4},  # optional
      "folds": {"k": 10, "train_per_fold": 9000,
                "test_per_fold": 1000, "seed": 0}   # cmd-folds only
    }

Every run is a pure function of the config: weight init draws from the root
stream of `seed`, while shuffling / dropout / augmentation use child streams
spawned from the same seed inside fit().
"""

import math
from dataclasses import dataclass

import numpy as np

from .data import augment, load_csv, load_idx, make_folds, synth_blobs, synth_spirals
from .errors import ConfigError, InvalidValueError, ShapeError
from .evaluate import per_layer_gains
from .layers import (
    BatchNorm,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    MaxPool2d,
    Network,
    ReLU,
    ResidualBlock,
)
from .optim import Adam, MaxGainConfig, Schedule, SgdNesterov, eval_metrics, fit
from .tensor import init_weights, make_rng

_TOP_KEYS = {"seed", "model", "init", "optimizer", "lr", "momentum", "schedule",
             "epochs", "batch_size", "maxgain", "dataset", "test_dataset",
             "augment", "folds"}
_REQUIRED_KEYS = ("model", "optimizer", "lr", "epochs", "dataset")


def _need(spec, key, what):
    if key not in spec:
        raise ConfigError(f"{what} is missing required key {key!r}")
    return spec[key]


def parse_norm_order(value):
    if value in (1, 2):
        return value
    if value == "inf" or value == math.inf:
        return math.inf
    raise ConfigError(f"norm order must be 1, 2 or \"inf\", got {value!r}")


def check_config(config):
    if not isinstance(config, dict):
        raise ConfigError("config must be a mapping")
    for key in config:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
    for key in _REQUIRED_KEYS:
        if key not in config:
            raise ConfigError(f"config is missing required key {key!r}")
    if config["optimizer"] not in ("adam", "sgd"):
        raise ConfigError(f"optimizer must be \"adam\" or \"sgd\", got {config['optimizer']!r}")


def build_stage(spec, scheme, rng):
    if not isinstance(spec, dict) or "type" not in spec:
        raise ConfigError(f"model stage must be a mapping with a \"type\", got {spec!r}")
    kind = spec["type"]
    try:
        return _build_stage_inner(spec, kind, scheme, rng)
    except ConfigError:
        raise
    except (InvalidValueError, ShapeError) as err:
        raise ConfigError(f"bad {kind} stage: {err}") from None


def _build_stage_inner(spec, kind, scheme, rng):
    if kind == "dense":
        n_in, n_out = int(_need(spec, "in", "dense stage")), int(_need(spec, "out", "dense stage"))
        w = init_weights((n_out, n_in), scheme, rng)
        return Dense(w, np.zeros(n_out))
    if kind == "conv":
        n_in, n_out = int(_need(spec, "in", "conv stage")), int(_need(spec, "out", "conv stage"))
        k = int(_need(spec, "kernel", "conv stage"))
        kernel = init_weights((n_out, n_in, k, k), scheme, rng)
        return Conv2d(kernel, np.zeros(n_out),
                      stride=int(spec.get("stride", 1)), pad=int(spec.get("pad", 0)))
    if kind == "batchnorm":
        c = int(_need(spec, "channels", "batchnorm stage"))
        return BatchNorm(np.ones(c), np.zeros(c),
                         momentum=float(spec.get("momentum", 0.9)),
                         eps=float(spec.get("eps", 1e-5)))
    if kind == "dropout":
        return Dropout(float(_need(spec, "rate", "dropout stage")))
    if kind == "relu":
        return ReLU()
    if kind == "maxpool":
        k = int(_need(spec, "kernel", "maxpool stage"))
        stride = spec.get("stride")
        return MaxPool2d(k, stride=int(stride) if stride is not None else None)
    if kind == "flatten":
        return Flatten()
    if kind == "residual":
        main = [build_stage(s, scheme, rng) for s in _need(spec, "main", "residual stage")]
        shortcut = spec.get("shortcut")
        if shortcut is not None:
            shortcut = [build_stage(s, scheme, rng) for s in shortcut]
        return ResidualBlock(main, shortcut)
    raise ConfigError(f"unknown stage type {kind!r}")


def build_network(config, rng):
    scheme = config.get("init", "he-normal")
    stages = [build_stage(s, scheme, rng) for s in config["model"]]
    return Network(stages)


def build_dataset(spec):
    if not isinstance(spec, dict) or "type" not in spec:
        raise ConfigError(f"dataset spec must be a mapping with a \"type\", got {spec!r}")
    kind = spec["type"]
    if kind == "spirals":
        rng = make_rng(int(spec.get("seed", 0)))
        return synth_spirals(int(_need(spec, "n", "spirals dataset")), rng,
                             classes=int(spec.get("classes", 2)),
                             turns=float(spec.get("turns", 1.75)),
                             noise_sd=float(spec.get("noise_sd", 0.15)))
    if kind == "blobs":
        rng = make_rng(int(spec.get("seed", 0)))
        return synth_blobs(int(_need(spec, "n", "blobs dataset")), rng,
                           centers=_need(spec, "centers", "blobs dataset"),
                           sd=float(spec.get("sd", 1.0)))
    if kind == "idx":
        return load_idx(_need(spec, "images", "idx dataset"), _need(spec, "labels", "idx dataset"))
    if kind == "csv":
        return load_csv(_need(spec, "path", "csv dataset"),
                        label_col=int(spec.get("label_col", -1)),
                        feature_cols=spec.get("feature_cols"))
    raise ConfigError(f"unknown dataset type {kind!r}")


def build_optimizer(config):
    if config["optimizer"] == "adam":
        return Adam()
    return SgdNesterov(momentum=float(config.get("momentum", 0.9)))


def build_maxgain(config):
    spec = config.get("maxgain")
    if spec is None:
        return None
    if not isinstance(spec, dict):
        raise ConfigError(f"maxgain must be a mapping or null, got {spec!r}")
    try:
        return MaxGainConfig(gamma=float(_need(spec, "gamma", "maxgain")),
                             p=parse_norm_order(spec.get("p", 2)))
    except InvalidValueError as err:
        raise ConfigError(f"bad maxgain settings: {err}") from None


def build_augment_fn(config):
    spec = config.get("augment")
    if not spec:
        return None
    flip = bool(spec.get("flip", False))
    pad = int(spec.get("pad", 0))
    crop = spec.get("crop")
    if not flip and pad == 0:
        return None

    def apply(xb, rng):
        return augment(xb, rng, flip=flip, pad=pad,
                       crop=int(crop) if crop is not None else None)

    return apply


def build_schedule(config):
    try:
        drops = tuple((int(e), float(f)) for e, f in config.get("schedule", ()))
        return Schedule(base_lr=float(config["lr"]), drops=drops)
    except ConfigError:
        raise
    except (InvalidValueError, TypeError, ValueError) as err:
        raise ConfigError(f"bad lr/schedule: {err}") from None


@dataclass
class RunResult:
    net: object
    ledger: object
    train_loss: float
    train_accuracy: float
    test_loss: float = None
    test_accuracy: float = None
    test_max_gains: list = None


def run_config(config, gamma_override=None, seed_override=None):
    """Build everything from a config dict, train, and score.

    gamma_override replaces the configured maxgain gamma (the sweep driver);
    seed_override replaces the training/init seed while the dataset seeds stay
    as configured.
    """
    check_config(config)
    seed = int(seed_override if seed_override is not None else config.get("seed", 0))
    train = build_dataset(config["dataset"])
    test = build_dataset(config["test_dataset"]) if config.get("test_dataset") else None
    net = build_network(config, make_rng(seed))
    maxgain = build_maxgain(config)
    if gamma_override is not None:
        base_p = maxgain.p if maxgain is not None else 2
        maxgain = MaxGainConfig(gamma=float(gamma_override), p=base_p)
    ledger = fit(net, train,
                 optimizer=build_optimizer(config),
                 schedule=build_schedule(config),
                 epochs=int(config["epochs"]),
                 batch_size=int(config.get("batch_size", 64)),
                 maxgain=maxgain,
                 seed=seed,
                 test=test,
                 augment_fn=build_augment_fn(config))
    train_loss, train_acc = eval_metrics(net, train.x, train.y)
    result = RunResult(net=net, ledger=ledger, train_loss=train_loss, train_accuracy=train_acc)
    if test is not None:
        result.test_loss, result.test_accuracy = eval_metrics(net, test.x, test.y)
        p = maxgain.p if maxgain is not None else 2
        result.test_max_gains = [float(g.max()) for g in per_layer_gains(net, test.x, p)]
    return result


def run_sweep_point(args):
    """One gamma sweep point; takes (config, gamma) so it maps over a pool."""
    config, gamma = args
    return run_config(config, gamma_override=gamma)


@dataclass(frozen=True)
class FoldScores:
    """Per-fold test accuracies of one configuration."""

    scores: tuple  # (fold_index, accuracy) pairs

    def to_lines(self):
        lines = ["fold\taccuracy"]
        for f, acc in self.scores:
            lines.append(f"{f}\t{acc:.17g}")
        return lines

    def to_text(self):
        return "\n".join(self.to_lines()) + "\n"

    @property
    def accuracies(self):
        return np.asarray([acc for _, acc in self.scores])


def build_fold_protocol(config, dataset):
    spec = config.get("folds")
    if not isinstance(spec, dict):
        raise ConfigError("config needs a \"folds\" mapping with k/train_per_fold/test_per_fold")
    return make_folds(dataset,
                      int(_need(spec, "k", "folds")),
                      int(_need(spec, "train_per_fold", "folds")),
                      int(_need(spec, "test_per_fold", "folds")),
                      make_rng(int(spec.get("seed", 0))))


def run_fold_point(args):
    """Train on one fold; takes (config, fold_index, train_idx, test_idx)."""
    config, fold_index, train_idx, test_idx = args
    check_config(config)
    seed = int(config.get("seed", 0)) + int(fold_index)
    full = build_dataset(config["dataset"])
    train, test = full.subset(np.asarray(train_idx)), full.subset(np.asarray(test_idx))
    net = build_network(config, make_rng(seed))
    fit(net, train,
        optimizer=build_optimizer(config),
        schedule=build_schedule(config),
        epochs=int(config["epochs"]),
        batch_size=int(config.get("batch_size", 64)),
        maxgain=build_maxgain(config),
        seed=seed,
        augment_fn=build_augment_fn(config))
    _, acc = eval_metrics(net, test.x, test.y)
    return fold_index, acc


def run_folds(config, protocol=None, jobs=1):
    """Train and score the configuration on every fold of the protocol.

    Each fold trains a fresh network with seed (config seed + fold index).
    Returns FoldScores ordered by fold index.
    """
    check_config(config)
    if protocol is None:
        protocol = build_fold_protocol(config, build_dataset(config["dataset"]))
    tasks = [(config, f, fold.train, fold.test) for f, fold in enumerate(protocol.folds)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_fold_point, tasks))
    else:
        results = [run_fold_point(t) for t in tasks]
    return FoldScores(scores=tuple(results))
