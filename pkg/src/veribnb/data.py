"""Datasets: a seeded two-moons generator, labelled CSV files and IDX image pairs."""
import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (N, d) float64
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    n_classes: int = None
    input_range: tuple = (0.0, 1.0)
    normalization: dict = field(default_factory=dict)

    def __post_init__(self):
        x, y = self.inputs, self.labels
        if x.ndim != 2 or y.ndim != 1 or len(x) != len(y):
            raise DatasetError(f"inputs {x.shape} and labels {y.shape} do not match")
        if len(y) == 0:
            raise DatasetError("dataset is empty")
        n_classes = int(y.max()) + 1 if self.n_classes is None else self.n_classes
        object.__setattr__(self, "n_classes", n_classes)
        if y.min() < 0 or y.max() >= n_classes:
            raise DatasetError(f"labels must lie in [0, {n_classes})")
        lo, hi = self.input_range
        if np.any(x < lo) or np.any(x > hi):
            raise DatasetError(f"inputs fall outside the declared range [{lo}, {hi}]")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.inputs.shape[1]

    def subset(self, idx, split=None):
        return Dataset(self.inputs[idx], self.labels[idx], split or self.split, self.n_classes,
                       self.input_range, self.normalization)

    def train_test_split(self, test_fraction=0.2, seed=0):
        perm = np.random.default_rng(seed).permutation(len(self))
        n_test = int(round(test_fraction * len(self)))
        return self.subset(np.sort(perm[n_test:]), "train"), self.subset(np.sort(perm[:n_test]), "test")


def two_moons(n=1000, noise=0.1, seed=0, split="train", dim=2):
    """Two interleaving half circles, rescaled into the unit square.

    Rescaling uses the noiseless extent padded by a fixed margin, and points
    pushed beyond it by noise are clipped. Half the points (rounded up) get
    label 0. With ``dim > 2`` the moons occupy the first two coordinates and
    the rest are uniform nuisance features in [0, 1].
    """
    if n < 2 or dim < 2:
        raise DatasetError("two-moons needs n >= 2 and dim >= 2")
    rng = np.random.default_rng(seed)
    n0 = (n + 1) // 2
    n1 = n - n0
    t0 = np.linspace(0, np.pi, n0)
    t1 = np.linspace(0, np.pi, n1)
    outer = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    inner = np.stack([1 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([outer, inner]) + noise * rng.standard_normal((n, 2))
    y = np.concatenate([np.zeros(n0, np.int64), np.ones(n1, np.int64)])
    perm = rng.permutation(n)
    x, y = x[perm], y[perm]
    pad = 3 * noise
    lo = np.array([-1.0 - pad, -0.5 - pad])
    hi = np.array([2.0 + pad, 1.0 + pad])
    x = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    if dim > 2:
        x = np.concatenate([x, rng.random((n, dim - 2))], axis=1)
    return Dataset(x, y, split, 2)


def load_csv(path, split="train", n_classes=None, input_range=(0.0, 1.0)):
    """Rows of ``label,f0,f1,...`` after a header naming exactly those columns."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    expected = ["label"] + [f"f{i}" for i in range(len(header) - 1)]
    if header != expected or len(header) < 2:
        raise DatasetError(f"{path}: header must be 'label,f0,f1,...', got {','.join(header)!r}")
    xs, ys = [], []
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DatasetError(f"{path}: row {r} has {len(row)} columns, expected {len(header)}")
        try:
            label = int(row[0])
        except ValueError:
            raise DatasetError(f"{path}: row {r}, column 'label': {row[0]!r} is not an integer") from None
        feats = []
        for c, cell in enumerate(row[1:]):
            try:
                feats.append(float(cell))
            except ValueError:
                raise DatasetError(f"{path}: row {r}, column 'f{c}': {cell!r} is not a number") from None
        xs.append(feats)
        ys.append(label)
    if not ys:
        raise DatasetError(f"{path}: no data rows")
    return Dataset(np.array(xs, np.float64), np.array(ys, np.int64), split, n_classes, input_range)


def save_csv(ds: Dataset, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"f{i}" for i in range(ds.dim)])
        for x, y in zip(ds.inputs, ds.labels):
            w.writerow([int(y)] + [repr(float(v)) for v in x])


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path):
    """Parse one IDX file (unsigned-byte payload) into an ndarray."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated header")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != 0x08 or ndim < 1:
        raise DatasetError(f"{path}: bad magic number 0x{int.from_bytes(raw[:4], 'big'):08x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DatasetError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head != count:
        raise DatasetError(f"{path}: payload has {len(raw) - head} bytes, header promises {count}")
    return np.frombuffer(raw, np.uint8, count, head).reshape(dims)


def write_idx(array, path):
    array = np.asarray(array, np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header + array.tobytes())


def load_idx(images, labels, n=None, classes=None, seed=0, split="train"):
    """Image/label IDX pair scaled to [0, 1], optionally class-filtered and subsampled.

    ``classes`` keeps only those labels and renumbers them 0..k-1 in the given
    order; ``n`` draws that many samples without replacement using ``seed``.
    """
    x = read_idx(images)
    y = read_idx(labels).astype(np.int64)
    if y.ndim != 1:
        raise DatasetError(f"{labels}: label file must be one-dimensional")
    if x.shape[0] != y.shape[0]:
        raise DatasetError(f"{images} has {x.shape[0]} items but {labels} has {y.shape[0]}")
    x = x.reshape(len(x), -1).astype(np.float64) / 255.0
    n_classes = 10
    if classes is not None:
        classes = list(classes)
        keep = np.isin(y, classes)
        x, y = x[keep], y[keep]
        remap = {c: i for i, c in enumerate(classes)}
        y = np.array([remap[int(v)] for v in y], np.int64)
        n_classes = len(classes)
    if n is not None and n < len(y):
        idx = np.sort(np.random.default_rng(seed).choice(len(y), n, replace=False))
        x, y = x[idx], y[idx]
    if len(y) and y.max() >= n_classes:
        raise DatasetError(f"{labels}: label {int(y.max())} outside [0, {n_classes})")
    return Dataset(x, y, split, n_classes)


def ingest(source):
    """Build a Dataset from a source description.

    ``source`` is a path to a CSV file, or a dict with ``kind`` one of
    ``two_moons`` (``n``, ``noise``, ``seed``, ``dim``), ``csv`` (``path``) or ``idx``
    (``images``, ``labels``, optional ``n``, ``classes``, ``seed``).
    """
    if isinstance(source, (str, Path)):
        return load_csv(source)
    src = dict(source)
    kind = src.pop("kind", None)
    split = src.pop("split", "train")
    if kind == "two_moons":
        return two_moons(src.get("n", 1000), src.get("noise", 0.1), src.get("seed", 0), split,
                         src.get("dim", 2))
    if kind == "csv":
        return load_csv(src["path"], split, src.get("n_classes"))
    if kind == "idx":
        return load_idx(src["images"], src["labels"], src.get("n"), src.get("classes"),
                        src.get("seed", 0), split)
    raise DatasetError(f"unknown dataset kind {kind!r}")
