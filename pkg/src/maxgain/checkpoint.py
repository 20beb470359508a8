"""Line-oriented text checkpoints that round-trip weights bit-exactly.

Layout (version 1):

    maxgain-checkpoint v1
    stages <count>
    stage <type> [key=value ...]
    array <name> <ndim> <dim...>
    <values, space separated, 17 significant digits>
    ...
    end

Residual blocks nest: `stage residual`, `main <k>`, k stage blocks,
`shortcut <m>` (0 means identity), m stage blocks, `end`. 17 significant
digits are enough to reproduce every float64 exactly on parse.
"""

import numpy as np

from .errors import FormatError, InvalidValueError
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
from .tensor import DTYPE

_HEADER = "maxgain-checkpoint v1"


def _fmt(x):
    return f"{x:.17g}"


def _emit_array(lines, name, arr):
    dims = " ".join(str(d) for d in arr.shape)
    lines.append(f"array {name} {arr.ndim} {dims}".rstrip())
    lines.append(" ".join(_fmt(v) for v in arr.reshape(-1)))


def _emit_stage(lines, st):
    if isinstance(st, Dense):
        lines.append("stage dense")
        _emit_array(lines, "w", st.w)
        _emit_array(lines, "b", st.b)
    elif isinstance(st, Conv2d):
        lines.append(f"stage conv stride={st.stride} pad={st.pad}")
        _emit_array(lines, "kernel", st.kernel)
        _emit_array(lines, "b", st.b)
    elif isinstance(st, BatchNorm):
        lines.append(f"stage batchnorm momentum={_fmt(st.momentum)} eps={_fmt(st.eps)}")
        _emit_array(lines, "alpha", st.alpha)
        _emit_array(lines, "beta", st.beta)
        _emit_array(lines, "running_mean", st.running_mean)
        _emit_array(lines, "running_var", st.running_var)
    elif isinstance(st, Dropout):
        lines.append(f"stage dropout rate={_fmt(st.rate)}")
    elif isinstance(st, ReLU):
        lines.append("stage relu")
    elif isinstance(st, MaxPool2d):
        lines.append(f"stage maxpool kernel={st.kernel} stride={st.stride}")
    elif isinstance(st, Flatten):
        lines.append("stage flatten")
    elif isinstance(st, ResidualBlock):
        lines.append("stage residual")
        lines.append(f"main {len(st.main)}")
        for sub in st.main:
            _emit_stage(lines, sub)
        shortcut = st.shortcut or []
        lines.append(f"shortcut {len(shortcut)}")
        for sub in shortcut:
            _emit_stage(lines, sub)
    else:
        raise InvalidValueError(f"cannot checkpoint stage type {type(st).__name__}")
    lines.append("end")


def network_to_text(net):
    lines = [_HEADER, f"stages {len(net.stages)}"]
    for st in net.stages:
        _emit_stage(lines, st)
    return "\n".join(lines) + "\n"


def save_network(net, path):
    with open(path, "w") as fh:
        fh.write(network_to_text(net))


class _Reader:
    def __init__(self, text):
        self.lines = text.splitlines()
        self.pos = 0

    def next(self, what="line"):
        if self.pos >= len(self.lines):
            raise FormatError(f"unexpected end of checkpoint, wanted {what}")
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def at_end(self):
        return self.pos >= len(self.lines)


def _parse_attrs(tokens, what):
    attrs = {}
    for tok in tokens:
        if "=" not in tok:
            raise FormatError(f"malformed attribute {tok!r} in {what}")
        key, value = tok.split("=", 1)
        attrs[key] = value
    return attrs


def _parse_float(token, what):
    try:
        return float(token)
    except ValueError:
        raise FormatError(f"bad float {token!r} in {what}") from None


def _parse_int(token, what):
    try:
        return int(token)
    except ValueError:
        raise FormatError(f"bad integer {token!r} in {what}") from None


def _read_array(reader, expect_name):
    head = reader.next(f"array {expect_name}").split()
    if len(head) < 3 or head[0] != "array" or head[1] != expect_name:
        raise FormatError(f"expected array {expect_name!r}, got {' '.join(head)!r}")
    ndim = _parse_int(head[2], "array header")
    dims = [_parse_int(d, "array dims") for d in head[3:]]
    if len(dims) != ndim:
        raise FormatError(f"array {expect_name}: {ndim} dims declared, {len(dims)} given")
    count = int(np.prod(dims)) if dims else 1
    values = reader.next(f"values of {expect_name}").split()
    if len(values) != count:
        raise FormatError(f"array {expect_name}: expected {count} values, got {len(values)}")
    arr = np.array([_parse_float(v, f"array {expect_name}") for v in values], dtype=DTYPE)
    return arr.reshape(dims)


def _expect_end(reader, what):
    line = reader.next(f"end of {what}")
    if line != "end":
        raise FormatError(f"expected 'end' closing {what}, got {line!r}")


def _parse_stage(reader):
    head = reader.next("stage header").split()
    if not head or head[0] != "stage":
        raise FormatError(f"expected a stage header, got {' '.join(head)!r}")
    if len(head) < 2:
        raise FormatError("stage header is missing its type")
    kind = head[1]
    attrs = _parse_attrs(head[2:], f"{kind} stage")
    if kind == "dense":
        w = _read_array(reader, "w")
        b = _read_array(reader, "b")
        _expect_end(reader, "dense stage")
        return Dense(w, b)
    if kind == "conv":
        stride = _parse_int(attrs.get("stride", "1"), "conv stride")
        pad = _parse_int(attrs.get("pad", "0"), "conv pad")
        kernel = _read_array(reader, "kernel")
        b = _read_array(reader, "b")
        _expect_end(reader, "conv stage")
        return Conv2d(kernel, b, stride=stride, pad=pad)
    if kind == "batchnorm":
        momentum = _parse_float(attrs.get("momentum", "0.9"), "batchnorm momentum")
        eps = _parse_float(attrs.get("eps", "1e-05"), "batchnorm eps")
        alpha = _read_array(reader, "alpha")
        beta = _read_array(reader, "beta")
        running_mean = _read_array(reader, "running_mean")
        running_var = _read_array(reader, "running_var")
        _expect_end(reader, "batchnorm stage")
        layer = BatchNorm(alpha, beta, momentum=momentum, eps=eps)
        layer.running_mean = running_mean
        layer.running_var = running_var
        return layer
    if kind == "dropout":
        _expect_end(reader, "dropout stage")
        return Dropout(_parse_float(attrs.get("rate", "0"), "dropout rate"))
    if kind == "relu":
        _expect_end(reader, "relu stage")
        return ReLU()
    if kind == "maxpool":
        if "kernel" not in attrs:
            raise FormatError("maxpool stage is missing its kernel= attribute")
        kernel = _parse_int(attrs["kernel"], "maxpool kernel")
        stride = _parse_int(attrs.get("stride", str(kernel)), "maxpool stride")
        _expect_end(reader, "maxpool stage")
        return MaxPool2d(kernel, stride=stride)
    if kind == "flatten":
        _expect_end(reader, "flatten stage")
        return Flatten()
    if kind == "residual":
        head = reader.next("main count").split()
        if len(head) != 2 or head[0] != "main":
            raise FormatError(f"expected 'main <count>', got {' '.join(head)!r}")
        main = [_parse_stage(reader) for _ in range(_parse_int(head[1], "main count"))]
        head = reader.next("shortcut count").split()
        if len(head) != 2 or head[0] != "shortcut":
            raise FormatError(f"expected 'shortcut <count>', got {' '.join(head)!r}")
        n_short = _parse_int(head[1], "shortcut count")
        shortcut = [_parse_stage(reader) for _ in range(n_short)] if n_short else None
        _expect_end(reader, "residual stage")
        return ResidualBlock(main, shortcut)
    raise FormatError(f"unknown stage type {kind!r}")


def network_from_text(text):
    reader = _Reader(text)
    if reader.next("header") != _HEADER:
        raise FormatError(f"not a checkpoint file (expected {_HEADER!r} header)")
    head = reader.next("stage count").split()
    if len(head) != 2 or head[0] != "stages":
        raise FormatError(f"expected 'stages <count>', got {' '.join(head)!r}")
    stages = [_parse_stage(reader) for _ in range(_parse_int(head[1], "stage count"))]
    if not reader.at_end():
        raise FormatError(f"trailing content after the last stage: {reader.next()!r}")
    return Network(stages)


def load_network(path):
    with open(path) as fh:
        return network_from_text(fh.read())
