"""Datasets: IDX and CSV loading, synthetic generators, augmentation, folds."""

import csv
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptySampleError, FormatError, ShapeError
from .tensor import DTYPE

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """A batch of instances x with integer labels y in [0, class_count)."""

    x: np.ndarray
    y: np.ndarray
    class_count: int
    classes: list = None  # original label values for mapped labels, else None

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise ShapeError(
                f"{self.x.shape[0]} instances but {self.y.shape[0]} labels")
        if self.x.shape[0] == 0:
            raise EmptySampleError("dataset is empty")

    def __len__(self):
        return self.x.shape[0]

    def subset(self, indices):
        return Dataset(self.x[indices], self.y[indices], self.class_count, self.classes)


def _read_exact(fh, count, path, what):
    buf = fh.read(count)
    if len(buf) != count:
        raise FormatError(f"{path}: truncated {what} (wanted {count} bytes, got {len(buf)})")
    return buf


def load_idx(images_path, labels_path):
    """Load an image/label file pair in the classic big-endian IDX layout.

    Pixels come in as unsigned bytes and are mapped to [-1, 1] via v / 127.5 - 1.
    Output x has shape (n, 1, rows, cols).
    """
    with open(images_path, "rb") as fh:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, images_path, "header"))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        raw = _read_exact(fh, n * rows * cols, images_path, "pixel data")
        if fh.read(1):
            raise FormatError(f"{images_path}: trailing bytes after pixel data")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)
    x = pixels.astype(DTYPE) / 127.5 - 1.0

    with open(labels_path, "rb") as fh:
        magic, n_labels = struct.unpack(">II", _read_exact(fh, 8, labels_path, "header"))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        raw = _read_exact(fh, n_labels, labels_path, "label data")
        if fh.read(1):
            raise FormatError(f"{labels_path}: trailing bytes after label data")
    if n_labels != n:
        raise FormatError(f"count mismatch: {n} images vs {n_labels} labels")
    y = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    return Dataset(x, y, class_count=int(y.max()) + 1 if n else 0)


def _parse_float(token, path, line_no):
    try:
        return float(token)
    except ValueError:
        raise FormatError(f"{path}:{line_no}: non-numeric feature value {token!r}") from None


def load_csv(path, label_col=-1, feature_cols=None):
    """Load a CSV of numeric features plus one label column.

    A header row is skipped if its label cell does not parse as a number.
    Label values (numeric or string) are mapped to dense indices 0..K-1 in
    sorted order; the original values are kept on Dataset.classes.
    """
    rows = []
    labels = []
    width = None
    with open(path, newline="") as fh:
        for line_no, rec in enumerate(csv.reader(fh), start=1):
            if not rec:
                continue
            if width is None:
                width = len(rec)
                try:
                    float(rec[label_col])
                except (ValueError, IndexError):
                    continue  # header row
            if len(rec) != width:
                raise FormatError(f"{path}:{line_no}: expected {width} columns, got {len(rec)}")
            cols = feature_cols
            if cols is None:
                lab = label_col % width
                cols = [c for c in range(width) if c != lab]
            rows.append([_parse_float(rec[c], path, line_no) for c in cols])
            labels.append(rec[label_col])
    if not rows:
        raise EmptySampleError(f"{path}: no data rows")
    x = np.asarray(rows, dtype=DTYPE)

    # map labels (numeric if possible, else lexicographic) to dense indices
    try:
        values = sorted({float(v) for v in labels})
        keyed = [float(v) for v in labels]
    except ValueError:
        values = sorted(set(labels))
        keyed = labels
    index = {v: i for i, v in enumerate(values)}
    y = np.asarray([index[v] for v in keyed], dtype=np.int64)
    return Dataset(x, y, class_count=len(values), classes=values)


def _balanced_counts(n, classes):
    base, extra = divmod(n, classes)
    return [base + (1 if c < extra else 0) for c in range(classes)]


def synth_spirals(n, rng, classes=2, turns=1.75, noise_sd=0.15):
    """Interleaved 2-d spirals, one arm per class, radius 0.2 to 1.0.

    Class sizes are balanced to within one instance. Deterministic given rng.
    """
    if n < 1:
        raise EmptySampleError("need at least one instance")
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    xs, ys = [], []
    for c, count in enumerate(_balanced_counts(n, classes)):
        t = rng.random(count)
        r = 0.2 + 0.8 * t
        theta = 2.0 * np.pi * turns * t + 2.0 * np.pi * c / classes
        pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        pts += rng.normal(0.0, noise_sd, size=pts.shape)
        xs.append(pts)
        ys.append(np.full(count, c, dtype=np.int64))
    return Dataset(np.concatenate(xs).astype(DTYPE), np.concatenate(ys), class_count=classes)


def synth_blobs(n, rng, centers, sd=1.0):
    """Isotropic gaussian blobs, one per row of centers, balanced within one."""
    centers = np.asarray(centers, dtype=DTYPE)
    if centers.ndim != 2 or centers.shape[0] < 2:
        raise ConfigError(f"centers must be a (K>=2, d) array, got shape {centers.shape}")
    if n < 1:
        raise EmptySampleError("need at least one instance")
    k = centers.shape[0]
    xs, ys = [], []
    for c, count in enumerate(_balanced_counts(n, k)):
        xs.append(centers[c] + rng.normal(0.0, sd, size=(count, centers.shape[1])))
        ys.append(np.full(count, c, dtype=np.int64))
    return Dataset(np.concatenate(xs).astype(DTYPE), np.concatenate(ys), class_count=k)


def flip_images(x, mask):
    """Mirror the selected instances of an (N, C, H, W) batch horizontally."""
    out = np.array(x, dtype=DTYPE)
    out[mask] = out[mask][..., ::-1]
    return out


def pad_crop_images(x, pad, size, offsets):
    """Zero-pad all sides by pad, then crop a (size x size) window per instance.

    offsets[i] = (row, col) of the top-left corner in the padded image.
    """
    n, c, h, w = x.shape
    ph, pw = h + 2 * pad, w + 2 * pad
    if size > ph or size > pw:
        raise ConfigError(f"crop {size} exceeds padded image ({ph}x{pw})")
    padded = np.pad(np.asarray(x, dtype=DTYPE), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty((n, c, size, size), dtype=DTYPE)
    for i in range(n):
        r, col = int(offsets[i][0]), int(offsets[i][1])
        out[i] = padded[i, :, r:r + size, col:col + size]
    return out


def augment(x, rng, flip=False, pad=0, crop=None):
    """Random horizontal flips (p=0.5) and random zero-pad crops on a batch.

    Flips happen first, then cropping. crop defaults to the original height
    (images are assumed square for cropping). Labels are untouched; pass the
    image batch only.
    """
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise ShapeError(f"augment expects an (N, C, H, W) batch, got shape {x.shape}")
    if flip:
        x = flip_images(x, rng.random(x.shape[0]) < 0.5)
    if pad:
        size = crop if crop is not None else x.shape[2]
        high = x.shape[2] + 2 * pad - size
        if high < 0:
            raise ConfigError(f"crop {size} exceeds padded image")
        offsets = rng.integers(0, high + 1, size=(x.shape[0], 2))
        x = pad_crop_images(x, pad, size, offsets)
    return x


@dataclass(frozen=True)
class Fold:
    train: np.ndarray
    test: np.ndarray


@dataclass(frozen=True)
class FoldProtocol:
    """k disjoint folds, each split into a train and a test segment.

    One seeded permutation of all instances is cut into k consecutive blocks
    of train_size + test_size; the leading segment of each block trains, the
    trailing one tests. This is repeated evaluation on disjoint subsets, not
    cross-validation: no instance appears in more than one fold.
    """

    n_instances: int
    folds: tuple

    def save(self, path):
        doc = {
            "format": "maxgain-folds",
            "version": 1,
            "n_instances": self.n_instances,
            "folds": [{"train": f.train.tolist(), "test": f.test.tolist()} for f in self.folds],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)
            fh.write("\n")

    @staticmethod
    def load(path):
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise FormatError(f"{path}: not valid JSON ({err})") from None
        if not isinstance(doc, dict) or doc.get("format") != "maxgain-folds":
            raise FormatError(f"{path}: not a fold-protocol file")
        if doc.get("version") != 1:
            raise FormatError(f"{path}: unsupported fold-protocol version {doc.get('version')!r}")
        folds = tuple(
            Fold(np.asarray(f["train"], dtype=np.int64), np.asarray(f["test"], dtype=np.int64))
            for f in doc["folds"])
        return FoldProtocol(n_instances=int(doc["n_instances"]), folds=folds)


def make_folds(data, k, train_per_fold, test_per_fold, rng):
    """Split a dataset (or an instance count) into a k-fold protocol.

    Needs k * (train_per_fold + test_per_fold) <= n; leftover instances are
    simply unused.
    """
    n = data if isinstance(data, int) else data.x.shape[0]
    k, tr, te = int(k), int(train_per_fold), int(test_per_fold)
    if k < 1 or tr < 1 or te < 1:
        raise ConfigError(f"fold geometry must be positive, got k={k} train={tr} test={te}")
    if k * (tr + te) > n:
        raise ConfigError(f"{k} folds of {tr}+{te} need {k * (tr + te)} instances, have {n}")
    perm = rng.permutation(n)
    folds = []
    for f in range(k):
        block = perm[f * (tr + te):(f + 1) * (tr + te)]
        folds.append(Fold(train=block[:tr].astype(np.int64), test=block[tr:].astype(np.int64)))
    return FoldProtocol(n_instances=n, folds=tuple(folds))
