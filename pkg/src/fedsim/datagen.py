"""Synthetic data, CSV ingestion and non-iid client partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, CsvFormatError, InputError, PartitionError, SplitError


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise InputError("features must be a 2-D array")
        if self.features.shape[0] != self.labels.shape[0]:
            raise InputError("features and labels disagree on sample count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class ClientShard:
    client_id: int
    train: Dataset
    test: Dataset

    @property
    def label_histogram(self) -> np.ndarray:
        return self.train.histogram() + self.test.histogram()


@dataclass(frozen=True)
class SynthConfig:
    n_clients: int = 20
    classes: int = 10
    samples_per_client: int = 500
    feature_dim: int = 32
    label_skew_alpha: float = 0.1
    feature_shift_scale: float = 1.0
    noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_clients", "classes", "samples_per_client", "feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.label_skew_alpha <= 0:
            raise ConfigError("label_skew_alpha must be positive")
        if self.feature_shift_scale < 0 or self.noise_scale < 0:
            raise ConfigError("feature_shift_scale and noise_scale must be non-negative")


@dataclass
class SynthData:
    """A generated dataset plus the per-client feature offsets to apply after partitioning."""

    dataset: Dataset
    centers: np.ndarray
    client_shifts: np.ndarray


def synth_generate(cfg: SynthConfig) -> SynthData:
    """Gaussian class clusters with balanced labels.

    Class centers are standard-normal draws, rescaled if needed so every
    pair sits at least ``4 * noise_scale`` apart. Client shifts are random
    directions of norm ``feature_shift_scale``.
    """
    rng = np.random.default_rng(cfg.seed)
    k, d = cfg.classes, cfg.feature_dim
    centers = rng.standard_normal((k, d))
    if k > 1:
        diff = centers[:, None, :] - centers[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        min_dist = dist[~np.eye(k, dtype=bool)].min()
        need = 4.0 * cfg.noise_scale
        if min_dist < need:
            centers *= need / min_dist
    n = cfg.n_clients * cfg.samples_per_client
    labels = rng.permutation(np.arange(n) % k)
    features = centers[labels] + cfg.noise_scale * rng.standard_normal((n, d))
    shifts = rng.standard_normal((cfg.n_clients, d))
    norms = np.linalg.norm(shifts, axis=1, keepdims=True)
    shifts = cfg.feature_shift_scale * shifts / np.where(norms > 0, norms, 1.0)
    return SynthData(Dataset(features, labels, k), centers, shifts)


def standardize(ds: Dataset) -> Dataset:
    """Zero mean, unit variance per feature over the whole dataset."""
    mean = ds.features.mean(axis=0)
    std = ds.features.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return Dataset((ds.features - mean) / std, ds.labels, ds.num_classes)


def _largest_remainder(props: np.ndarray, total: int) -> np.ndarray:
    raw = props * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort keeps ties in index order
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(labels, n_clients: int, alpha: float, rng: np.random.Generator, *,
                        min_samples: int = 10, max_retries: int = 100) -> np.ndarray:
    """Assign every sample to a client with per-class Dirichlet proportions.

    Returns an array mapping sample index to client id. Draws are repeated
    (continuing the same generator) until every client holds at least
    ``min_samples`` samples.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if alpha <= 0:
        raise InputError("alpha must be positive")
    if n_clients < 1:
        raise InputError("n_clients must be at least 1")
    n = labels.shape[0]
    if n_clients == 1:
        return np.zeros(n, dtype=np.int64)
    classes = np.unique(labels)
    sizes = None
    for _ in range(max_retries):
        assign = np.empty(n, dtype=np.int64)
        for k in classes:
            idx = np.flatnonzero(labels == k)
            idx = idx[rng.permutation(idx.size)]
            props = rng.dirichlet(np.full(n_clients, alpha))
            counts = _largest_remainder(props, idx.size)
            assign[idx] = np.repeat(np.arange(n_clients), counts)
        sizes = np.bincount(assign, minlength=n_clients)
        if sizes.min() >= min_samples:
            return assign
    raise PartitionError(
        f"could not give every one of {n_clients} clients >= {min_samples} samples "
        f"after {max_retries} draws (n={n}, alpha={alpha}); last client sizes: {sizes.tolist()}")


def split_train_test(ds: Dataset, ratio: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Stratified split; singleton classes go to train.

    The train size is ``round(ratio * n)`` whenever the per-class
    constraints (at least one train and one test sample per class of size
    >= 2) allow it.
    """
    if not 0.0 < ratio < 1.0:
        raise InputError("ratio must lie in (0, 1)")
    n = len(ds)
    if n < 2:
        raise SplitError(f"shard of size {n} cannot be split")
    per_class = []
    for k in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == k)
        if idx.size:
            per_class.append(idx[rng.permutation(idx.size)])

    sizes = np.array([c.size for c in per_class])
    raw = ratio * sizes
    n_train = np.floor(raw).astype(np.int64)
    n_train = np.where(sizes >= 2, np.clip(n_train, 1, sizes - 1), sizes)
    target = int(np.floor(ratio * n + 0.5))
    short = target - int(n_train.sum())
    if short > 0:
        order = np.argsort(-(raw - np.floor(raw)), kind="stable")
        for c in order:
            if short == 0:
                break
            if sizes[c] >= 2 and n_train[c] < sizes[c] - 1:
                n_train[c] += 1
                short -= 1
    train_idx = np.concatenate([c[:t] for c, t in zip(per_class, n_train)])
    test_idx = np.concatenate([c[t:] for c, t in zip(per_class, n_train)])
    return ds.subset(np.sort(train_idx)), ds.subset(np.sort(test_idx))


def make_shards(ds: Dataset, assignment: np.ndarray, n_clients: int, ratio: float,
                rng: np.random.Generator, shifts: np.ndarray | None = None) -> list[ClientShard]:
    """Build client shards from an assignment, adding each client's feature offset."""
    shards = []
    for c in range(n_clients):
        part = ds.subset(np.flatnonzero(assignment == c))
        if shifts is not None:
            part = Dataset(part.features + shifts[c], part.labels, part.num_classes)
        train, test = split_train_test(part, ratio, rng)
        shards.append(ClientShard(c, train, test))
    return shards


def load_csv(path) -> Dataset:
    """Read ``f0,...,f{D-1},label`` rows; K is max label + 1."""
    feats, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        d = len(header) - 1
        if d < 1 or header[-1] != "label" or header[:-1] != [f"f{i}" for i in range(d)]:
            raise CsvFormatError("header must be f0,...,f{D-1},label", line=1)
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != d + 1:
                raise CsvFormatError(f"expected {d + 1} fields, got {len(row)}", line=line)
            try:
                values = [float(v) for v in row[:-1]]
            except ValueError as exc:
                raise CsvFormatError(f"bad feature value ({exc})", line=line) from None
            if not all(np.isfinite(values)):
                raise CsvFormatError("non-finite feature value", line=line)
            try:
                label = int(row[-1].strip())
            except ValueError:
                raise CsvFormatError(f"label {row[-1]!r} is not an integer", line=line) from None
            if label < 0:
                raise CsvFormatError(f"negative label {label}", line=line)
            feats.append(values)
            labels.append(label)
    if not labels:
        raise InputError(f"{path}: no data rows")
    return Dataset(np.array(feats), np.array(labels), max(labels) + 1)


def write_csv(ds: Dataset, path):
    """Write in the ``load_csv`` format with 17 significant digits."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"f{i}" for i in range(ds.dim)] + ["label"])
        for x, y in zip(ds.features, ds.labels):
            writer.writerow([f"{v:.17g}" for v in x] + [int(y)])


def label_entropy(hist) -> float:
    hist = np.asarray(hist, dtype=np.float64)
    total = hist.sum()
    if total == 0:
        return 0.0
    p = hist[hist > 0] / total
    return float(-(p * np.log(p)).sum())
