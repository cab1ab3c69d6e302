"""Datasets, synthetic gaussian mixtures and Dirichlet non-IID client splits."""
from __future__ import annotations

import csv
import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError, PartitionError
from .numerics import RngStream, as_matrix

log = logging.getLogger(__name__)

BINARY_MAGIC = b"FDS1"


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    is_test: np.ndarray = None

    def __post_init__(self):
        x = as_matrix(self.features)
        y = np.asarray(self.labels).astype(np.int64).ravel()
        if y.shape[0] != x.shape[0]:
            raise DataError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(x)):
            raise DataError("features contain non-finite values")
        test = (np.zeros(len(y), dtype=bool) if self.is_test is None
                else np.asarray(self.is_test, dtype=bool).ravel())
        if test.shape != y.shape:
            raise DataError("split tag length does not match sample count")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "is_test", test)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.is_test)

    def test_indices(self) -> np.ndarray:
        return np.flatnonzero(self.is_test)

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes,
                              self.is_test[idx])

    def with_split(self, test_fraction: float, rng) -> "LabeledDataset":
        """Tag a stratified random ``test_fraction`` of each class as test."""
        gen = rng.generator() if isinstance(rng, RngStream) else rng
        test = np.zeros(len(self), dtype=bool)
        for c in range(self.num_classes):
            idx = np.flatnonzero(self.labels == c)
            n_test = int(round(test_fraction * idx.size))
            test[gen.permutation(idx)[:n_test]] = True
        return LabeledDataset(self.features, self.labels, self.num_classes, test)

    def select_classes(self, classes, relabel: bool = True) -> "LabeledDataset":
        """Keep only ``classes``; with ``relabel`` they become 0..len(classes)-1."""
        classes = list(classes)
        keep = np.isin(self.labels, classes)
        sub = self.subset(np.flatnonzero(keep))
        if not relabel:
            return sub
        mapping = {c: k for k, c in enumerate(classes)}
        labels = np.array([mapping[c] for c in sub.labels], dtype=np.int64)
        return LabeledDataset(sub.features, labels, len(classes), sub.is_test)


def load_csv(path) -> LabeledDataset:
    """Read a ``label,f0,...,f{d-1}`` file; the class count is max label + 1."""
    path = Path(path)
    labels, rows = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        if not header or header[0].strip() != "label":
            raise ParseError("header must start with 'label'", line=1)
        d = len(header) - 1
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise ParseError(f"expected {d + 1} fields, got {len(row)}", line=lineno)
            try:
                label = int(row[0])
            except ValueError:
                raise DataError(f"line {lineno}: label {row[0]!r} is not an integer") from None
            if label < 0:
                raise DataError(f"line {lineno}: negative label {label}")
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            labels.append(label)
    if not labels:
        raise DataError(f"{path}: no data rows")
    y = np.array(labels, dtype=np.int64)
    num_classes = int(y.max()) + 1
    empty = sorted(set(range(num_classes)) - set(y.tolist()))
    if empty:
        log.warning("%s: classes %s have no samples", path, empty)
    return LabeledDataset(np.array(rows, dtype=np.float64).reshape(len(labels), d), y,
                          num_classes)


def write_csv(ds: LabeledDataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{k}" for k in range(ds.dim)])
        for label, row in zip(ds.labels, ds.features):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


def load_binary(path) -> LabeledDataset:
    """Read the flat ``FDS1`` format: magic, u32 n, d, C, u32 labels, f32 features."""
    raw = Path(path).read_bytes()
    if raw[:4] != BINARY_MAGIC:
        raise ParseError("bad magic bytes, expected FDS1")
    if len(raw) < 16:
        raise ParseError("truncated header")
    n, d, c = struct.unpack("<III", raw[4:16])
    expected = 16 + 4 * n + 4 * n * d
    if len(raw) != expected:
        raise ParseError(f"file has {len(raw)} bytes, header implies {expected}")
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=16).astype(np.int64)
    feats = np.frombuffer(raw, dtype="<f4", count=n * d, offset=16 + 4 * n)
    return LabeledDataset(feats.astype(np.float64).reshape(n, d), labels, c)


def write_binary(ds: LabeledDataset, path) -> None:
    n, d = ds.features.shape
    with Path(path).open("wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<III", n, d, ds.num_classes))
        fh.write(ds.labels.astype("<u4").tobytes())
        fh.write(ds.features.astype("<f4").tobytes())


def load_dataset(path) -> LabeledDataset:
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(4)
    return load_binary(path) if magic == BINARY_MAGIC else load_csv(path)


def gaussian_means(num_classes: int, dim: int, separation: float, gen) -> np.ndarray:
    """Class centres with every pair exactly ``separation`` apart.

    The centres are the vertices of a regular simplex in a random
    orientation.  When ``num_classes > dim + 1`` no such simplex exists and
    random centres are rescaled so the closest pair is ``separation`` apart.
    """
    if num_classes <= dim + 1:
        basis, _ = np.linalg.qr(gen.standard_normal((dim, num_classes - 1)))
        vertices = np.eye(num_classes) - 1.0 / num_classes
        u, s, _ = np.linalg.svd(vertices)
        coords = u[:, :num_classes - 1] * s[:num_classes - 1]
        return coords @ basis.T * (separation / np.sqrt(2.0))
    mu = gen.standard_normal((num_classes, dim))
    diff = mu[:, None, :] - mu[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    closest = dist[~np.eye(num_classes, dtype=bool)].min()
    return mu * (separation / closest)


def synth_gaussian_mixture(num_classes: int, per_class: int, dim: int, spread: float,
                           separation: float, rng, test_fraction: float = 0.2) -> LabeledDataset:
    """Isotropic gaussian blobs, one per class, with a stratified test split."""
    if num_classes < 2 or dim < 2:
        raise DataError("need at least 2 classes and 2 dimensions")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    means = gaussian_means(num_classes, dim, separation, gen)
    labels = np.repeat(np.arange(num_classes), per_class)
    feats = means[labels] + spread * gen.standard_normal((labels.size, dim))
    n_test = int(round(test_fraction * per_class))
    test = np.zeros(labels.size, dtype=bool)
    for c in range(num_classes):
        idx = np.arange(c * per_class, (c + 1) * per_class)
        test[gen.permutation(idx)[:n_test]] = True
    return LabeledDataset(feats, labels, num_classes, test)


@dataclass(frozen=True)
class ClientPartition:
    indices: tuple
    alpha: float
    seed: int
    min_size: int = 0

    @property
    def num_clients(self) -> int:
        return len(self.indices)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.indices], dtype=np.int64)

    @property
    def weights(self) -> np.ndarray:
        counts = self.counts
        return counts / counts.sum()

    def digest(self) -> str:
        h = hashlib.sha256()
        for ix in self.indices:
            h.update(np.asarray(ix, dtype="<i8").tobytes())
            h.update(b"|")
        return h.hexdigest()[:16]


def dirichlet_partition(ds: LabeledDataset, num_clients: int, alpha: float, rng,
                        min_size: int = 10, max_retries: int = 100) -> ClientPartition:
    """Split the training rows class by class with ``Dir(alpha)`` client shares.

    Each class's rows are dealt to clients by a multinomial draw over
    proportions sampled from a symmetric Dirichlet.  Whole configurations
    are redrawn until every client holds at least ``min_size`` rows.
    """
    if not alpha > 0:
        raise PartitionError(f"alpha must be positive, got {alpha}")
    if num_clients < 1:
        raise PartitionError("need at least one client")
    if not isinstance(rng, RngStream):
        raise TypeError("dirichlet_partition needs an RngStream")
    gen = rng.child(domain="partition").generator()
    train = ds.train_indices()
    by_class = [train[ds.labels[train] == c] for c in range(ds.num_classes)]
    for _ in range(max_retries):
        buckets = [[] for _ in range(num_clients)]
        for idx in by_class:
            if idx.size == 0:
                continue
            shares = gen.dirichlet(np.full(num_clients, float(alpha)))
            counts = gen.multinomial(idx.size, shares)
            cuts = np.cumsum(counts)[:-1]
            for k, part in enumerate(np.split(gen.permutation(idx), cuts)):
                buckets[k].append(part)
        parts = tuple(np.sort(np.concatenate(b)) if b else np.zeros(0, dtype=np.int64)
                      for b in buckets)
        if min(len(p) for p in parts) >= min_size:
            return ClientPartition(parts, float(alpha), rng.seed, min_size)
    raise PartitionError(
        f"could not give every one of {num_clients} clients {min_size} samples "
        f"after {max_retries} draws (alpha={alpha})")


@dataclass(frozen=True)
class ClientData:
    client_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.train_y)

    @property
    def n_train(self) -> int:
        return self.train_y.shape[0]


TEST_MODES = ("matched", "present", "full")


def _matched_test_rows(ds, train, test, gen):
    """Largest draw from the test pool whose label mix follows the client's training mix."""
    classes, counts = np.unique(ds.labels[train], return_counts=True)
    pools = [gen.permutation(test[ds.labels[test] == c]) for c in classes]
    avail = np.array([p.size for p in pools])
    if avail.min() == 0:
        scale = 0.0
    else:
        scale = min(1.0, float((avail / counts).min()))
    rows = [pool[:min(pool.size, int(round(scale * n)))] for pool, n in zip(pools, counts)]
    return np.sort(np.concatenate(rows)) if rows else np.zeros(0, dtype=np.int64)


def client_view(ds: LabeledDataset, part: ClientPartition, i: int,
                test_mode: str = "matched") -> ClientData:
    """Client ``i``'s training rows and its personal test set.

    ``test_mode`` picks the test rows from the global test split:
    ``matched`` draws a subset whose class proportions follow the client's
    training labels, ``present`` keeps every test row of a class the client
    holds, ``full`` keeps the whole split.
    """
    if not 0 <= i < part.num_clients:
        raise IndexError(f"client {i} out of range for {part.num_clients} clients")
    if test_mode not in TEST_MODES:
        raise DataError(f"unknown test mode {test_mode!r}")
    train = part.indices[i]
    test = ds.test_indices()
    if test_mode == "present":
        test = test[np.isin(ds.labels[test], ds.labels[train])]
    elif test_mode == "matched":
        gen = RngStream(part.seed, "client-test", i).generator()
        test = _matched_test_rows(ds, train, test, gen)
    return ClientData(i, ds.features[train], ds.labels[train], ds.features[test],
                      ds.labels[test], ds.num_classes)


def all_client_views(ds, part, test_mode: str = "matched") -> list:
    return [client_view(ds, part, i, test_mode) for i in range(part.num_clients)]
