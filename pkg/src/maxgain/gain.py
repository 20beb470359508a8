"""Empirical gain measurement and operator-norm machinery.

The gain of a learned layer on an instance x is ||Wx||_p / ||x||_p where Wx is
the layer's bias-free linear action (apply_linear). Exact operator norms exist
for p in {1, inf}; p=2 goes through power iteration on the implicit map.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    AdjointMismatchError,
    CacheError,
    EmptySampleError,
    InvalidValueError,
    ShapeError,
)
from .layers import (
    BatchNorm,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    LEARNED_TYPES,
    MaxPool2d,
    ResidualBlock,
    apply_linear,
)
from .tensor import DTYPE, check_norm_order, make_rng, vector_p_norm


def gain(layer, x, p):
    """Gain of one learned layer on one instance; zero input has gain 0."""
    check_norm_order(p)
    x = np.asarray(x, dtype=DTYPE)
    nx = vector_p_norm(x, p)
    if nx == 0.0:
        return 0.0
    z = apply_linear(layer, x)
    return vector_p_norm(z, p) / nx


def batch_norms(arr, p):
    """Per-instance p-norms of a batch, flattening everything past axis 0."""
    check_norm_order(p)
    flat = np.asarray(arr, dtype=DTYPE).reshape(arr.shape[0], -1)
    if p == 1:
        return np.abs(flat).sum(axis=1)
    if p == 2:
        return np.sqrt((flat * flat).sum(axis=1))
    return np.abs(flat).max(axis=1)


def instance_gains(xs, zs, p):
    """Per-instance gains ||z_i||_p / ||x_i||_p, with 0 where ||x_i||_p = 0."""
    nx = batch_norms(xs, p)
    nz = batch_norms(zs, p)
    out = np.zeros_like(nx)
    hit = nx > 0.0
    out[hit] = nz[hit] / nx[hit]
    return out


def batch_max_gain(layer, xs, zs, p):
    """Largest per-instance gain over cached (input, linear output) pairs.

    xs and zs are the X/Z caches recorded for this layer during a forward
    pass; the linear outputs are not recomputed here.
    """
    xs = np.asarray(xs, dtype=DTYPE)
    zs = np.asarray(zs, dtype=DTYPE)
    if xs.shape[0] != zs.shape[0]:
        raise CacheError(f"cache length mismatch: {xs.shape[0]} inputs vs {zs.shape[0]} outputs")
    if xs.shape[0] == 0:
        raise EmptySampleError("empty step caches")
    return float(instance_gains(xs, zs, p).max())


def operator_norm_exact(w, p):
    """Exact operator norm of a dense matrix for p=1 (max absolute column sum)
    or p=inf (max absolute row sum).

    Every sum runs over a contiguous row so it reduces exactly like a plain
    1-d numpy sum of the extracted vector; the result is then bitwise equal
    to maximizing ||W v||_p over the corresponding extreme vectors v.
    """
    w = np.ascontiguousarray(w, dtype=DTYPE)
    if w.ndim != 2 or w.shape[0] == 0 or w.shape[1] == 0:
        raise ShapeError(f"need a non-degenerate matrix, got shape {w.shape}")
    if p == 1:
        return float(np.max(np.ascontiguousarray(np.abs(w).T).sum(axis=1)))
    if p == math.inf:
        return float(np.max(np.abs(w).sum(axis=1)))
    raise InvalidValueError(f"exact operator norm needs p in {{1, inf}}, got {p!r}")


class PowerIterationResult(NamedTuple):
    value: float
    iterations: int


def spectral_norm_power_iteration(linear_map, adjoint_map, input_dim,
                                  iters=100, tol=1e-9, rng=None,
                                  check_adjoint=True):
    """Largest singular value of an implicitly given linear map.

    Power iteration on A^T A from a random seeded start vector. The pair
    (linear_map, adjoint_map) is probabilistically verified against
    <Ax, y> = <x, A^T y> before iterating; a mismatch beyond 1e-8 relative
    raises AdjointMismatchError. A zero map returns 0.

    Args:
        linear_map: flat float64 vector of length input_dim -> output vector.
        adjoint_map: output vector -> flat vector of length input_dim.
        iters: iteration cap.
        tol: stop once the relative change of the estimate falls below this.
    """
    input_dim = int(input_dim)
    if input_dim < 1:
        raise ShapeError(f"input_dim must be >= 1, got {input_dim}")
    if rng is None:
        rng = make_rng(0)
    if check_adjoint:
        for _ in range(3):
            x = rng.normal(size=input_dim)
            ax = np.asarray(linear_map(x), dtype=DTYPE).reshape(-1)
            y = rng.normal(size=ax.shape[0])
            lhs = float(ax @ y)
            rhs = float(x @ np.asarray(adjoint_map(y), dtype=DTYPE).reshape(-1))
            if abs(lhs - rhs) > 1e-8 * max(1.0, abs(lhs), abs(rhs)):
                raise AdjointMismatchError(
                    f"<Ax, y> = {lhs!r} but <x, A^T y> = {rhs!r}")
    v = rng.normal(size=input_dim)
    v /= math.sqrt(float(v @ v))
    sigma = 0.0
    for it in range(1, iters + 1):
        u = np.asarray(linear_map(v), dtype=DTYPE).reshape(-1)
        s = math.sqrt(float(u @ u))
        if s == 0.0:
            return PowerIterationResult(0.0, it)
        w = np.asarray(adjoint_map(u), dtype=DTYPE).reshape(-1)
        nw = math.sqrt(float(w @ w))
        if nw == 0.0:
            return PowerIterationResult(s, it)
        v = w / nw
        if abs(s - sigma) <= tol * max(s, 1e-300):
            return PowerIterationResult(s, it)
        sigma = s
    return PowerIterationResult(sigma, iters)


_MATERIALIZE_LIMIT = 4096


def materialize_linear(layer, input_shape):
    """Dense matrix of a learned layer's linear action, probed column by column.

    Each standard basis vector of the (row-major flattened) input space is
    pushed through apply_linear; column k of the result is the flattened
    response. Refuses inputs with more than 4096 elements.
    """
    if isinstance(input_shape, int):
        input_shape = (input_shape,)
    input_shape = tuple(int(s) for s in input_shape)
    dim = int(np.prod(input_shape))
    if dim == 0:
        raise ShapeError(f"degenerate input shape {input_shape}")
    if dim > _MATERIALIZE_LIMIT:
        raise InvalidValueError(
            f"refusing to materialize a map with {dim} input elements (limit {_MATERIALIZE_LIMIT})")
    probe = np.zeros(input_shape, dtype=DTYPE)
    columns = []
    flat = probe.reshape(-1)
    for k in range(dim):
        flat[k] = 1.0
        columns.append(apply_linear(layer, probe).reshape(-1).copy())
        flat[k] = 0.0
    return np.stack(columns, axis=1)


def _layer_linear_ops(layer, input_shape):
    """Wrap a learned layer as flat-vector maps (A, A^T, input_dim)."""
    input_shape = (input_shape,) if isinstance(input_shape, int) else tuple(input_shape)
    dim = int(np.prod(input_shape))

    def amap(v):
        return layer.apply_linear(v.reshape(input_shape)).reshape(-1)

    if isinstance(layer, Dense):
        def atmap(u):
            return layer.apply_linear_adjoint(u)
    elif isinstance(layer, BatchNorm):
        def atmap(u):
            return layer.apply_linear_adjoint(u.reshape(input_shape)).reshape(-1)
    else:
        out_shape = layer.apply_linear(np.zeros(input_shape, dtype=DTYPE)).shape

        def atmap(u):
            return layer.apply_linear_adjoint(u.reshape(out_shape), input_shape).reshape(-1)

    return amap, atmap, dim


def layer_operator_norm(layer, p, input_shape, rng=None, iters=100, tol=1e-9):
    """Operator norm of a learned layer's linear action for p in {1, 2, inf}.

    BatchNorm is diagonal, so every p gives max |alpha_c| / sqrt(var_c + eps).
    Dense and Conv2d use exact column/row sums for p in {1, inf} (conv via the
    materialized matrix) and power iteration for p=2.
    """
    check_norm_order(p)
    if isinstance(layer, BatchNorm):
        scale = layer.alpha / np.sqrt(layer.running_var + layer.eps)
        return float(np.max(np.abs(scale)))
    if p == 2:
        amap, atmap, dim = _layer_linear_ops(layer, input_shape)
        return spectral_norm_power_iteration(
            amap, atmap, dim, iters=iters, tol=tol, rng=rng, check_adjoint=False).value
    if isinstance(layer, Dense):
        return operator_norm_exact(layer.w, p)
    return operator_norm_exact(materialize_linear(layer, input_shape), p)


def _stage_out_shape(stage, shape):
    """Instance shape (no batch axis) after one stage."""
    if isinstance(stage, Dense):
        if shape != (stage.in_features,):
            raise ShapeError(f"dense expects shape ({stage.in_features},), got {shape}")
        return (stage.out_features,)
    if isinstance(stage, Conv2d):
        oc, ic, kh, kw = stage.kernel.shape
        if len(shape) != 3 or shape[0] != ic:
            raise ShapeError(f"conv expects ({ic}, H, W), got {shape}")
        oh = (shape[1] + 2 * stage.pad - kh) // stage.stride + 1
        ow = (shape[2] + 2 * stage.pad - kw) // stage.stride + 1
        if oh <= 0 or ow <= 0:
            raise ShapeError(f"conv kernel does not fit input shape {shape}")
        return (oc, oh, ow)
    if isinstance(stage, MaxPool2d):
        if len(shape) != 3:
            raise ShapeError(f"maxpool expects (C, H, W), got {shape}")
        oh = (shape[1] - stage.kernel) // stage.stride + 1
        ow = (shape[2] - stage.kernel) // stage.stride + 1
        if oh <= 0 or ow <= 0:
            raise ShapeError(f"pooling window does not fit input shape {shape}")
        return (shape[0], oh, ow)
    if isinstance(stage, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(stage, ResidualBlock):
        out = shape
        for st in stage.main:
            out = _stage_out_shape(st, out)
        return out
    # BatchNorm, Dropout, ReLU keep the shape
    return shape


def _stages_bound(stages, p, shape, rng):
    bound = 1.0
    for stage in stages:
        if isinstance(stage, ResidualBlock):
            main_bound = _stages_bound(stage.main, p, shape, rng)
            short_bound = 1.0 if stage.shortcut is None else _stages_bound(stage.shortcut, p, shape, rng)
            bound *= main_bound + short_bound
        elif isinstance(stage, LEARNED_TYPES):
            bound *= layer_operator_norm(stage, p, shape, rng=rng)
        elif isinstance(stage, Dropout):
            bound *= 1.0 - stage.rate
        # ReLU, MaxPool2d, Flatten contribute a factor of 1
        shape = _stage_out_shape(stage, shape)
    return bound


def lipschitz_upper_bound(net, p, input_shape=None, rng=None):
    """Product-of-stages upper bound on the network's Lipschitz constant.

    Learned layers contribute their operator norm, ReLU/MaxPool/Flatten
    contribute 1, eval-mode Dropout contributes (1 - rate), and a residual
    block contributes (bound of main path) + (bound of shortcut). The bound
    describes the eval-mode function. input_shape (instance shape, no batch
    axis) can be omitted only when the first stage is Dense.
    """
    check_norm_order(p)
    if input_shape is None:
        first = net.stages[0]
        if not isinstance(first, Dense):
            raise InvalidValueError("input_shape is required unless the first stage is Dense")
        input_shape = (first.in_features,)
    elif isinstance(input_shape, int):
        input_shape = (input_shape,)
    else:
        input_shape = tuple(input_shape)
    if rng is None:
        rng = make_rng(0)
    return _stages_bound(net.stages, p, input_shape, rng)


@dataclass(frozen=True)
class GainStats:
    """Five-number summary of a gain sample."""

    min: float
    lower_quartile: float
    median: float
    upper_quartile: float
    max: float
    n: int


def _quantile(sorted_values, phi):
    # linear interpolation between order statistics (the type-7 rule)
    n = sorted_values.shape[0]
    h = (n - 1) * phi
    lo = int(math.floor(h))
    hi = min(lo + 1, n - 1)
    frac = h - lo
    return float(sorted_values[lo] + frac * (sorted_values[hi] - sorted_values[lo]))


def gain_stats(values):
    """Five-number summary (min, quartiles, max) of a sequence of gains."""
    values = np.asarray(values, dtype=DTYPE)
    if values.ndim != 1:
        values = values.reshape(-1)
    if values.size == 0:
        raise EmptySampleError("gain_stats needs at least one value")
    s = np.sort(values)
    return GainStats(
        min=float(s[0]),
        lower_quartile=_quantile(s, 0.25),
        median=_quantile(s, 0.5),
        upper_quartile=_quantile(s, 0.75),
        max=float(s[-1]),
        n=int(s.shape[0]),
    )
