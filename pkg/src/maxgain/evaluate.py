"""Scoring, the paired t-test, gamma sweeps, and gain reports."""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    DegenerateSampleError,
    EmptySampleError,
    InvalidValueError,
    ShapeError,
)
from .gain import GainStats, gain_stats, instance_gains
from .layers import forward
from .tensor import DTYPE, check_finite


def accuracy(predictions, labels):
    """Fraction of exact label matches."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise ShapeError(
            f"predictions {predictions.shape} and labels {labels.shape} must be matching vectors")
    if predictions.shape[0] == 0:
        raise EmptySampleError("no predictions to score")
    return float(np.mean(predictions == labels))


def log_loss(probs, labels, clip=1e-12):
    """Mean negative log-probability of the true class.

    Rows of probs must sum to 1 within 1e-6; probabilities are clipped below
    at `clip` so a confidently wrong prediction stays finite.
    """
    probs = np.asarray(probs, dtype=DTYPE)
    labels = np.asarray(labels)
    if probs.ndim != 2 or labels.ndim != 1 or probs.shape[0] != labels.shape[0]:
        raise ShapeError(f"probs {probs.shape} and labels {labels.shape} do not align")
    if probs.shape[0] == 0:
        raise EmptySampleError("no predictions to score")
    check_finite(probs, "probabilities")
    sums = probs.sum(axis=1)
    if np.max(np.abs(sums - 1.0)) > 1e-6:
        raise InvalidValueError("probability rows must sum to 1 within 1e-6")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise IndexError(f"labels outside [0, {probs.shape[1]})")
    picked = probs[np.arange(probs.shape[0]), labels]
    return float(np.mean(-np.log(np.maximum(picked, clip))))


# --- Student t machinery -------------------------------------------------
#
# The two-sided p-value comes from the regularized incomplete beta function
# I_x(a, b), evaluated with the classic continued-fraction expansion (modified
# Lentz recurrence, as in the cephes incbet routine). For a t statistic with
# nu degrees of freedom: p = I_{nu / (nu + t^2)}(nu/2, 1/2).

_CF_MAX_ITER = 500
_CF_EPS = 1e-16
_CF_TINY = 1e-300


def _beta_cf(a, b, x):
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise InvalidValueError(f"incomplete beta did not converge for a={a} b={b} x={x}")


def regularized_incomplete_beta(a, b, x):
    """I_x(a, b) for a, b > 0 and x in [0, 1], accurate to ~1e-14."""
    if a <= 0.0 or b <= 0.0:
        raise InvalidValueError(f"beta parameters must be positive, got a={a} b={b}")
    if not 0.0 <= x <= 1.0:
        raise InvalidValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (a * math.log(x) + b * math.log1p(-x)
                - (math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)))
    front = math.exp(ln_front)
    # the continued fraction converges fastest below the distribution mode
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


class TTestResult(NamedTuple):
    t: float
    df: int
    p: float


def paired_t_test(a, b):
    """Two-sided paired t-test between per-fold scores a and b.

    t = mean(d) / (sd(d) / sqrt(k)) with d = a - b and the ddof=1 standard
    deviation; df = k - 1. Identical score vectors have zero variance and are
    rejected rather than reported as p=0.
    """
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"need two equal-length score vectors, got {a.shape} and {b.shape}")
    k = a.shape[0]
    if k < 2:
        raise EmptySampleError(f"paired t-test needs at least 2 pairs, got {k}")
    check_finite(a, "scores a")
    check_finite(b, "scores b")
    d = a - b
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateSampleError("zero variance of differences")
    t = float(np.mean(d)) / (sd / math.sqrt(k))
    df = k - 1
    p = regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
    return TTestResult(t=t, df=df, p=p)


# --- gain reports --------------------------------------------------------


def per_layer_gains(net, x, p, batch_size=256):
    """Per-instance gains of every learned layer on a split, eval mode.

    Returns one array of len(x) gains per learned layer, in
    Network.learned_layers() order.
    """
    n_layers = len(net.learned_layers())
    if n_layers == 0:
        raise InvalidValueError("network has no learned layers")
    chunks = [[] for _ in range(n_layers)]
    for i in range(0, x.shape[0], batch_size):
        _, caches = forward(net, x[i:i + batch_size], "eval")
        for j in range(n_layers):
            chunks[j].append(instance_gains(caches.xs[j], caches.zs[j], p))
    return [np.concatenate(c) for c in chunks]


@dataclass(frozen=True)
class GainReportRow:
    layer_index: int
    split: str
    stats: GainStats


@dataclass(frozen=True)
class GainReport:
    p: object
    rows: tuple

    def to_lines(self):
        lines = ["layer_index\tsplit\tn\tmin\tlq\tmedian\tuq\tmax"]
        for r in self.rows:
            s = r.stats
            lines.append("\t".join([
                str(r.layer_index), r.split, str(s.n),
                f"{s.min:.17g}", f"{s.lower_quartile:.17g}", f"{s.median:.17g}",
                f"{s.upper_quartile:.17g}", f"{s.max:.17g}"]))
        return lines

    def to_text(self):
        return "\n".join(self.to_lines()) + "\n"


def gain_report(net, train, test, p, batch_size=256):
    """Five-number gain summaries per learned layer for both splits."""
    rows = []
    for split_name, ds in (("train", train), ("test", test)):
        if ds is None:
            continue
        gains = per_layer_gains(net, ds.x, p, batch_size=batch_size)
        for j, g in enumerate(gains):
            rows.append(GainReportRow(layer_index=j, split=split_name, stats=gain_stats(g)))
    if not rows:
        raise EmptySampleError("gain report needs at least one split")
    rows.sort(key=lambda r: (r.layer_index, r.split))
    return GainReport(p=p, rows=tuple(rows))


# --- gamma sweep ---------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    gamma: float
    train_accuracy: float
    train_loss: float
    test_accuracy: float
    test_loss: float
    test_max_gains: tuple  # per learned layer, max gain on the test split


@dataclass(frozen=True)
class SweepResult:
    rows: tuple

    def to_lines(self):
        lines = ["gamma\ttrain_accuracy\ttrain_loss\ttest_accuracy\ttest_loss\ttest_max_gain_per_layer"]
        for r in self.rows:
            gains = ",".join(f"{g:.17g}" for g in r.test_max_gains)
            lines.append("\t".join([
                f"{r.gamma:.17g}", f"{r.train_accuracy:.17g}", f"{r.train_loss:.17g}",
                f"{r.test_accuracy:.17g}", f"{r.test_loss:.17g}", gains]))
        return lines

    def to_text(self):
        return "\n".join(self.to_lines()) + "\n"


def gamma_sweep(config, gammas, jobs=1):
    """Train one model per gamma with identical data and seeds.

    config is an experiment configuration dict (see experiment.run_config);
    rows come back sorted by gamma regardless of execution order.
    """
    from . import experiment

    gammas = sorted(float(g) for g in gammas)
    if not gammas:
        raise EmptySampleError("gamma sweep needs at least one gamma")
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(experiment.run_sweep_point,
                                    [(config, g) for g in gammas]))
    else:
        results = [experiment.run_sweep_point((config, g)) for g in gammas]
    rows = []
    for g, res in zip(gammas, results):
        rows.append(SweepRow(
            gamma=g,
            train_accuracy=res.train_accuracy, train_loss=res.train_loss,
            test_accuracy=res.test_accuracy, test_loss=res.test_loss,
            test_max_gains=tuple(res.test_max_gains)))
    return SweepResult(rows=tuple(rows))
