"""Network stages with explicit forward/backward passes.

Stages are plain objects holding float64 parameter arrays. A forward pass
returns the output plus a cache object; backward consumes that cache and
returns the input gradient along with parameter gradients. Learned stages
(Dense, Conv2d, BatchNorm) additionally record, for every step, the batch of
inputs X and the bias-free linear outputs Z that the gain machinery consumes.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import CacheError, InvalidValueError, ShapeError
from .tensor import DTYPE, as_tensor, check_finite

MODES = ("train", "eval")


def _check_mode(mode):
    if mode not in MODES:
        raise InvalidValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def _check_batch(x, rank, what):
    if x.ndim != rank:
        raise ShapeError(f"{what} expects a rank-{rank} batch, got shape {x.shape}")
    if x.shape[0] == 0:
        raise ShapeError(f"{what} got an empty batch")


class Dense:
    """Affine map y = x W^T + b with W of shape (out, in)."""

    param_names = ("w", "b")
    weight_param = "w"

    def __init__(self, w, b):
        w = as_tensor(w, "dense weights")
        b = as_tensor(b, "dense bias")
        if w.ndim != 2:
            raise ShapeError(f"dense weights must be rank 2, got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"dense bias shape {b.shape} does not match weights {w.shape}")
        self.w = w
        self.b = b

    @property
    def in_features(self):
        return self.w.shape[1]

    @property
    def out_features(self):
        return self.w.shape[0]

    def forward(self, x, mode, rng=None):
        _check_batch(x, 2, "dense")
        if x.shape[1] != self.in_features:
            raise ShapeError(f"dense expects {self.in_features} features, got {x.shape[1]}")
        z = x @ self.w.T
        y = z + self.b
        return y, {"x": x, "z": z}

    def backward(self, grad_y, cache):
        x = cache["x"]
        grad_w = grad_y.T @ x
        grad_b = grad_y.sum(axis=0)
        grad_x = grad_y @ self.w
        return grad_x, {"w": grad_w, "b": grad_b}

    def apply_linear(self, x):
        if x.shape != (self.in_features,):
            raise ShapeError(f"expected a single instance of shape ({self.in_features},)")
        return self.w @ x

    def apply_linear_adjoint(self, y, input_shape=None):
        return self.w.T @ y


def _im2col(x, kh, kw, stride, pad):
    """Unfold (N, C, H, W) into rows of flattened receptive fields.

    Returns (cols, oh, ow) with cols of shape (N*oh*ow, C*kh*kw). Row order is
    instance-major then output position row-major, matching _col2im below.
    """
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"kernel ({kh}x{kw}) does not fit input ({h}x{w}) with pad {pad}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j, :, :] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw), oh, ow


def _col2im(cols, x_shape, kh, kw, stride, pad, oh, ow):
    """Adjoint of _im2col: scatter-add rows back onto the input grid."""
    n, c, h, w = x_shape
    cols6 = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols6[:, :, i, j, :, :]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return out


class Conv2d:
    """2-d convolution (cross-correlation) with stride and zero padding.

    kernel has shape (out_ch, in_ch, kh, kw); bias is per output channel.
    """

    param_names = ("kernel", "b")
    weight_param = "kernel"

    def __init__(self, kernel, b, stride=1, pad=0):
        kernel = as_tensor(kernel, "conv kernel")
        b = as_tensor(b, "conv bias")
        if kernel.ndim != 4:
            raise ShapeError(f"conv kernel must be rank 4, got {kernel.shape}")
        if b.shape != (kernel.shape[0],):
            raise ShapeError(f"conv bias shape {b.shape} does not match kernel {kernel.shape}")
        if stride < 1 or pad < 0:
            raise InvalidValueError(f"bad conv geometry: stride={stride} pad={pad}")
        self.kernel = kernel
        self.b = b
        self.stride = int(stride)
        self.pad = int(pad)

    def _linear(self, x):
        oc, ic, kh, kw = self.kernel.shape
        if x.shape[1] != ic:
            raise ShapeError(f"conv expects {ic} input channels, got {x.shape[1]}")
        cols, oh, ow = _im2col(x, kh, kw, self.stride, self.pad)
        z = cols @ self.kernel.reshape(oc, -1).T
        z = z.reshape(x.shape[0], oh, ow, oc).transpose(0, 3, 1, 2)
        return z, cols, oh, ow

    def forward(self, x, mode, rng=None):
        _check_batch(x, 4, "conv")
        z, cols, oh, ow = self._linear(x)
        y = z + self.b[None, :, None, None]
        return y, {"x": x, "z": z, "cols": cols, "oh": oh, "ow": ow}

    def backward(self, grad_y, cache):
        oc, ic, kh, kw = self.kernel.shape
        x, cols, oh, ow = cache["x"], cache["cols"], cache["oh"], cache["ow"]
        g2 = grad_y.transpose(0, 2, 3, 1).reshape(-1, oc)
        grad_kernel = (g2.T @ cols).reshape(self.kernel.shape)
        grad_b = grad_y.sum(axis=(0, 2, 3))
        grad_cols = g2 @ self.kernel.reshape(oc, -1)
        grad_x = _col2im(grad_cols, x.shape, kh, kw, self.stride, self.pad, oh, ow)
        return grad_x, {"kernel": grad_kernel, "b": grad_b}

    def apply_linear(self, x):
        if x.ndim != 3:
            raise ShapeError(f"expected a single (C, H, W) instance, got shape {x.shape}")
        z, _, _, _ = self._linear(x[None])
        return z[0]

    def apply_linear_adjoint(self, y, input_shape):
        oc, ic, kh, kw = self.kernel.shape
        if y.ndim != 3 or y.shape[0] != oc:
            raise ShapeError(f"adjoint input must be a single ({oc}, oh, ow) instance")
        oh, ow = y.shape[1], y.shape[2]
        g2 = y[None].transpose(0, 2, 3, 1).reshape(-1, oc)
        grad_cols = g2 @ self.kernel.reshape(oc, -1)
        out = _col2im(grad_cols, (1,) + tuple(input_shape), kh, kw, self.stride, self.pad, oh, ow)
        return out[0]


class BatchNorm:
    """Per-channel normalization with learned scale alpha and shift beta.

    Train mode normalizes with minibatch statistics (and the gradient flows
    through them); the recorded linear-output cache Z instead uses the running
    standard-deviation estimates, the same ones eval-mode predictions use, so
    gain measurements stay stable across minibatches. Running averages are
    updated before Z is recorded. Variance is the biased (1/N) estimate
    throughout.
    """

    param_names = ("alpha", "beta")
    weight_param = "alpha"

    def __init__(self, alpha, beta, momentum=0.9, eps=1e-5):
        alpha = as_tensor(alpha, "batchnorm alpha")
        beta = as_tensor(beta, "batchnorm beta")
        if alpha.ndim != 1 or alpha.shape != beta.shape:
            raise ShapeError(f"alpha/beta must be matching rank-1 arrays, got {alpha.shape} and {beta.shape}")
        if not 0.0 <= momentum < 1.0:
            raise InvalidValueError(f"momentum must be in [0, 1), got {momentum}")
        if eps <= 0.0:
            raise InvalidValueError(f"eps must be positive, got {eps}")
        self.alpha = alpha
        self.beta = beta
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.running_mean = np.zeros_like(alpha)
        self.running_var = np.ones_like(alpha)

    @property
    def channels(self):
        return self.alpha.shape[0]

    def _bshape(self, x):
        # broadcast shape for per-channel arrays against (N, C) or (N, C, H, W)
        if x.ndim == 2:
            return (1, self.channels)
        if x.ndim == 4:
            return (1, self.channels, 1, 1)
        raise ShapeError(f"batchnorm expects rank-2 or rank-4 input, got shape {x.shape}")

    def _check_channels(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels, got {x.shape[1]}")

    def forward(self, x, mode, rng=None, batch_stat_caches=False):
        if x.ndim not in (2, 4):
            raise ShapeError(f"batchnorm expects rank-2 or rank-4 input, got shape {x.shape}")
        _check_batch(x, x.ndim, "batchnorm")
        self._check_channels(x)
        bshape = self._bshape(x)
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        if mode == "train":
            if x.shape[0] < 2:
                raise ShapeError("train-mode batchnorm needs a batch of at least 2")
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mu.reshape(bshape)) * inv_std.reshape(bshape)
            y = self.alpha.reshape(bshape) * xhat + self.beta.reshape(bshape)
            m = self.momentum
            self.running_mean = m * self.running_mean + (1.0 - m) * mu
            self.running_var = m * self.running_var + (1.0 - m) * var
            if batch_stat_caches:
                z = x * (self.alpha * inv_std).reshape(bshape)
            else:
                z = x * (self.alpha / np.sqrt(self.running_var + self.eps)).reshape(bshape)
            cache = {"x": x, "z": z, "mu": mu, "var": var, "inv_std": inv_std, "xhat": xhat}
            return y, cache
        scale = self.alpha / np.sqrt(self.running_var + self.eps)
        z = x * scale.reshape(bshape)
        y = z + (self.beta - scale * self.running_mean).reshape(bshape)
        return y, {"x": x, "z": z}

    def backward(self, grad_y, cache):
        x, xhat, inv_std = cache["x"], cache["xhat"], cache["inv_std"]
        bshape = self._bshape(x)
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        m = x.shape[0] if x.ndim == 2 else x.shape[0] * x.shape[2] * x.shape[3]
        grad_beta = grad_y.sum(axis=axes)
        grad_alpha = (grad_y * xhat).sum(axis=axes)
        # gradient through the minibatch mean and variance
        gxhat = grad_y * self.alpha.reshape(bshape)
        gsum = gxhat.sum(axis=axes).reshape(bshape)
        gdot = (gxhat * xhat).sum(axis=axes).reshape(bshape)
        grad_x = inv_std.reshape(bshape) / m * (m * gxhat - gsum - xhat * gdot)
        return grad_x, {"alpha": grad_alpha, "beta": grad_beta}

    def apply_linear(self, x):
        if x.shape[0] != self.channels:
            raise ShapeError(f"expected a single instance with {self.channels} leading channels")
        scale = self.alpha / np.sqrt(self.running_var + self.eps)
        if x.ndim == 1:
            return x * scale
        if x.ndim == 3:
            return x * scale[:, None, None]
        raise ShapeError(f"expected a rank-1 or rank-3 instance, got shape {x.shape}")

    def apply_linear_adjoint(self, y, input_shape=None):
        return self.apply_linear(y)


class Dropout:
    """Zeroes activations with the given probability while training.

    Standard (non-inverted) form: train mode applies the binary mask with no
    rescaling, eval mode multiplies by the keep probability (1 - rate).
    """

    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise InvalidValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)

    def forward(self, x, mode, rng=None):
        if mode == "train":
            if rng is None:
                raise InvalidValueError("train-mode dropout needs an rng")
            mask = (rng.random(x.shape) >= self.rate).astype(DTYPE)
            return x * mask, {"mask": mask}
        return x * (1.0 - self.rate), {}

    def backward(self, grad_y, cache):
        return grad_y * cache["mask"], None


class ReLU:
    def forward(self, x, mode, rng=None):
        return np.maximum(x, 0.0), {"x": x}

    def backward(self, grad_y, cache):
        return grad_y * (cache["x"] > 0.0), None


class MaxPool2d:
    """Max pooling over square windows; stride defaults to the window size.

    When a window holds tied maxima the gradient is routed to the first
    position in row-major window order (what argmax returns).
    """

    def __init__(self, kernel, stride=None):
        if kernel < 1:
            raise InvalidValueError(f"pooling window must be >= 1, got {kernel}")
        self.kernel = int(kernel)
        self.stride = int(stride) if stride is not None else int(kernel)
        if self.stride < 1:
            raise InvalidValueError(f"pooling stride must be >= 1, got {self.stride}")

    def _windows(self, x):
        n, c, h, w = x.shape
        k, s = self.kernel, self.stride
        oh = (h - k) // s + 1
        ow = (w - k) // s + 1
        if oh <= 0 or ow <= 0:
            raise ShapeError(f"pooling window {k} does not fit input ({h}x{w})")
        cols = np.empty((n, c, k, k, oh, ow), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j, :, :] = x[:, :, i:i + s * oh:s, j:j + s * ow:s]
        return cols.reshape(n, c, k * k, oh, ow), oh, ow

    def forward(self, x, mode, rng=None):
        _check_batch(x, 4, "maxpool")
        windows, oh, ow = self._windows(x)
        idx = windows.argmax(axis=2)
        y = np.take_along_axis(windows, idx[:, :, None, :, :], axis=2)[:, :, 0, :, :]
        return y, {"x_shape": x.shape, "idx": idx, "oh": oh, "ow": ow}

    def backward(self, grad_y, cache):
        n, c, h, w = cache["x_shape"]
        k, s = self.kernel, self.stride
        oh, ow, idx = cache["oh"], cache["ow"], cache["idx"]
        gwin = np.zeros((n, c, k * k, oh, ow), dtype=DTYPE)
        np.put_along_axis(gwin, idx[:, :, None, :, :], grad_y[:, :, None, :, :], axis=2)
        gwin = gwin.reshape(n, c, k, k, oh, ow)
        grad_x = np.zeros((n, c, h, w), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                grad_x[:, :, i:i + s * oh:s, j:j + s * ow:s] += gwin[:, :, i, j, :, :]
        return grad_x, None


class Flatten:
    def forward(self, x, mode, rng=None):
        _check_batch(x, x.ndim, "flatten")
        if x.ndim < 2:
            raise ShapeError(f"flatten expects a batch, got shape {x.shape}")
        return x.reshape(x.shape[0], -1), {"x_shape": x.shape}

    def backward(self, grad_y, cache):
        return grad_y.reshape(cache["x_shape"]), None


class ResidualBlock:
    """Sum of a main stage sequence and a shortcut (identity when None).

    The block itself is not a learned layer; gain constraints see only the
    learned stages inside it, main path first, then the shortcut.
    """

    def __init__(self, main, shortcut=None):
        if not main:
            raise ShapeError("residual block needs a non-empty main path")
        self.main = list(main)
        self.shortcut = list(shortcut) if shortcut else None

    def forward(self, x, mode, rng=None, collector=None, bn_batch_stat_caches=False):
        y_main, caches_main = _forward_stages(
            self.main, x, mode, rng, collector, bn_batch_stat_caches)
        if self.shortcut is None:
            y_short, caches_short = x, None
        else:
            y_short, caches_short = _forward_stages(
                self.shortcut, x, mode, rng, collector, bn_batch_stat_caches)
        if y_main.shape != y_short.shape:
            raise ShapeError(
                f"residual branches disagree: main {y_main.shape} vs shortcut {y_short.shape}")
        return y_main + y_short, {"main": caches_main, "shortcut": caches_short}

    def backward(self, grad_y, cache, grad_sink=None):
        grad_main = _backward_stages(self.main, grad_y, cache["main"], grad_sink)
        if self.shortcut is None:
            grad_short = grad_y
        else:
            grad_short = _backward_stages(self.shortcut, grad_y, cache["shortcut"], grad_sink)
        return grad_main + grad_short, None


LEARNED_TYPES = (Dense, Conv2d, BatchNorm)


class Network:
    """An ordered stack of stages."""

    def __init__(self, stages):
        if not stages:
            raise ShapeError("network needs at least one stage")
        self.stages = list(stages)

    def learned_layers(self):
        """Learned stages in forward traversal order (residual: main, then shortcut)."""
        out = []
        _collect_learned(self.stages, out)
        return out


def _collect_learned(stages, out):
    for st in stages:
        if isinstance(st, ResidualBlock):
            _collect_learned(st.main, out)
            if st.shortcut is not None:
                _collect_learned(st.shortcut, out)
        elif isinstance(st, LEARNED_TYPES):
            out.append(st)


@dataclass
class StepCaches:
    """Everything one forward pass recorded.

    xs[j] / zs[j] are the input batch and bias-free linear output batch of the
    j-th learned layer, in Network.learned_layers() order. stage_caches mirrors
    the stage tree and feeds backward().
    """

    net_id: int
    mode: str
    batch_size: int
    stage_caches: list = field(default_factory=list)
    xs: list = field(default_factory=list)
    zs: list = field(default_factory=list)


@dataclass
class Gradients:
    by_layer: list
    input_grad: np.ndarray


class _Collector:
    __slots__ = ("xs", "zs")

    def __init__(self):
        self.xs = []
        self.zs = []


def _forward_stages(stages, x, mode, rng, collector, bn_flag):
    caches = []
    for st in stages:
        if isinstance(st, ResidualBlock):
            x, cache = st.forward(x, mode, rng, collector, bn_flag)
        elif isinstance(st, BatchNorm):
            x_in = x
            x, cache = st.forward(x, mode, rng, batch_stat_caches=bn_flag)
            if collector is not None:
                collector.xs.append(x_in)
                collector.zs.append(cache["z"])
        else:
            x_in = x
            x, cache = st.forward(x, mode, rng)
            if collector is not None and isinstance(st, LEARNED_TYPES):
                collector.xs.append(x_in)
                collector.zs.append(cache["z"])
        caches.append(cache)
    return x, caches


def _backward_stages(stages, grad, caches, grad_sink):
    for st, cache in zip(reversed(stages), reversed(caches)):
        if isinstance(st, ResidualBlock):
            grad, _ = st.backward(grad, cache, grad_sink)
        else:
            grad, param_grads = st.backward(grad, cache)
            if param_grads is not None and grad_sink is not None:
                grad_sink[id(st)] = param_grads
    return grad


def forward(net, x, mode, rng=None, bn_batch_stat_caches=False):
    """Run the network on a batch; returns (output, StepCaches).

    Train mode updates BatchNorm running statistics as a side effect and needs
    an rng whenever a Dropout stage is present. bn_batch_stat_caches switches
    the recorded BatchNorm Z caches to minibatch statistics; it exists to
    demonstrate why the default (running statistics) is used, not for training.
    """
    _check_mode(mode)
    x = as_tensor(x, "network input")
    if x.shape[0] == 0:
        raise ShapeError("network got an empty batch")
    collector = _Collector()
    y, stage_caches = _forward_stages(net.stages, x, mode, rng, collector, bn_batch_stat_caches)
    caches = StepCaches(
        net_id=id(net), mode=mode, batch_size=x.shape[0],
        stage_caches=stage_caches, xs=collector.xs, zs=collector.zs)
    return y, caches


def backward(net, caches, loss_grad):
    """Backpropagate loss_grad through the network using one step's caches.

    The caches must come from a train-mode forward pass on this very network;
    anything else raises CacheError.
    """
    if not isinstance(caches, StepCaches) or caches.net_id != id(net):
        raise CacheError("caches were not produced by this network")
    if caches.mode != "train":
        raise CacheError("backward needs caches from a train-mode forward pass")
    loss_grad = np.asarray(loss_grad, dtype=DTYPE)
    grad_sink = {}
    input_grad = _backward_stages(net.stages, loss_grad, caches.stage_caches, grad_sink)
    by_layer = []
    for layer in net.learned_layers():
        if id(layer) not in grad_sink:
            raise CacheError("stage caches do not cover every learned layer")
        by_layer.append(grad_sink[id(layer)])
    return Gradients(by_layer=by_layer, input_grad=input_grad)


def apply_linear(layer, x):
    """Bias-free linear action of a learned layer on one instance.

    Dense: W x. Conv2d: the convolution without bias. BatchNorm: the diagonal
    map diag(alpha / sqrt(running_var + eps)) x. Centering and shift terms are
    excluded by construction.
    """
    if not isinstance(layer, LEARNED_TYPES):
        raise InvalidValueError(f"{type(layer).__name__} has no linear part")
    return layer.apply_linear(as_tensor(x, "instance"))


def softmax(logits):
    """Row-wise softmax, stabilized by subtracting the row max."""
    logits = np.asarray(logits, dtype=DTYPE)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient wrt the logits.

    Returns (loss, grad) with grad = (softmax(logits) - onehot(labels)) / N.
    """
    logits = as_tensor(logits, "logits")
    if logits.ndim != 2:
        raise ShapeError(f"logits must be rank 2, got shape {logits.shape}")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.shape[0] == 0:
        raise ShapeError("empty batch")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InvalidValueError("labels must be integers")
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    row_max = logits.max(axis=1)
    lse = row_max + np.log(np.exp(logits - row_max[:, None]).sum(axis=1))
    loss = float(np.mean(lse - logits[np.arange(n), labels]))
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    check_finite(grad, "loss gradient")
    return loss, grad
