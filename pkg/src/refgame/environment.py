"""Object worlds: categorical feature distributions, game-pair sampling,
one-hot encodings, and dataset (de)serialization.

Feature values are 1-based in all external surfaces (object tuples, dataset
files) and 0-based in the columnar arrays used internally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import RngStream

ObjectVector = tuple[int, ...]

SKEWED_FIRST_FEATURE = (0.75, 0.15, 0.05, 0.05)
DEFAULT_SIZES = (128000, 16000, 4000)
SPLIT_NAMES = ("train", "valid", "test")

_DATASET_MAGIC = "refgame-dataset v1"


@dataclass(frozen=True)
class EnvironmentSpec:
    """Per-feature categorical distributions defining an object world."""

    n_features: int
    n_values: int
    probs: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        if self.n_features <= 0 or self.n_values <= 0:
            raise ValueError("n_features and n_values must be positive")
        if len(self.probs) != self.n_features:
            raise ValueError(f"expected {self.n_features} probability vectors")
        for i, row in enumerate(self.probs):
            if len(row) != self.n_values:
                raise ValueError(f"feature {i + 1}: expected {self.n_values} probabilities")
            if any(p < 0 for p in row):
                raise ValueError(f"feature {i + 1}: negative probability")
            if abs(sum(row) - 1.0) > 1e-12:
                raise ValueError(f"feature {i + 1}: probabilities sum to {sum(row)}")

    @classmethod
    def uniform(cls, n_features: int = 5, n_values: int = 4) -> "EnvironmentSpec":
        row = tuple([1.0 / n_values] * n_values)
        return cls(n_features, n_values, tuple([row] * n_features))

    @classmethod
    def skewed(cls, n_features: int = 5, n_values: int = 4) -> "EnvironmentSpec":
        """First feature distributed (0.75, 0.15, 0.05, 0.05), rest uniform."""
        if n_values != len(SKEWED_FIRST_FEATURE):
            raise ValueError("skewed preset is defined for 4 values per feature")
        row = tuple([1.0 / n_values] * n_values)
        return cls(n_features, n_values, (SKEWED_FIRST_FEATURE,) + tuple([row] * (n_features - 1)))

    @property
    def n_objects(self) -> int:
        return self.n_values**self.n_features

    def encoding_dim(self) -> int:
        return self.n_features * self.n_values

    def validate_object(self, obj: ObjectVector) -> None:
        if len(obj) != self.n_features:
            raise ValueError(f"object has {len(obj)} features, expected {self.n_features}")
        for v in obj:
            if not 1 <= v <= self.n_values:
                raise ValueError(f"feature value {v} out of range [1, {self.n_values}]")


@dataclass(frozen=True)
class GameInstance:
    """One referential round: the pair, its presentation order, and the label.

    ``order`` is the position of the target in the presented pair (0 = shown
    first, 1 = shown second); the label is the index the receiver must pick,
    which by construction equals ``order``.
    """

    target: ObjectVector
    distractor: ObjectVector
    order: int
    label: int

    def __post_init__(self):
        if self.target == self.distractor:
            raise ValueError("target and distractor must differ")
        if self.order not in (0, 1):
            raise ValueError("order must be 0 or 1")
        if self.label != self.order:
            raise ValueError("label inconsistent with presentation order")

    def presented_pair(self) -> tuple[ObjectVector, ObjectVector]:
        if self.order == 0:
            return self.target, self.distractor
        return self.distractor, self.target


class Split:
    """Columnar storage for one dataset partition (0-based feature values)."""

    def __init__(self, targets: np.ndarray, distractors: np.ndarray, labels: np.ndarray):
        self.targets = targets
        self.distractors = distractors
        self.labels = labels
        if len(targets) != len(distractors) or len(targets) != len(labels):
            raise ValueError("misaligned split columns")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> GameInstance:
        return GameInstance(
            target=tuple(int(v) + 1 for v in self.targets[i]),
            distractor=tuple(int(v) + 1 for v in self.distractors[i]),
            order=int(self.labels[i]),
            label=int(self.labels[i]),
        )

    def instances(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Split)
            and np.array_equal(self.targets, other.targets)
            and np.array_equal(self.distractors, other.distractors)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass
class DatasetSplits:
    spec: EnvironmentSpec
    sizes: tuple[int, int, int]
    seed: int
    train: Split
    valid: Split
    test: Split

    def split(self, name: str) -> Split:
        if name not in SPLIT_NAMES:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, "valid" if name == "valid" else name)


def sample_object(spec: EnvironmentSpec, rng: RngStream) -> ObjectVector:
    """Draw one object, each feature independently from its distribution."""
    u = rng.random(spec.n_features)
    values = []
    for f in range(spec.n_features):
        cdf = np.cumsum(spec.probs[f])
        values.append(int(np.searchsorted(cdf, u[f], side="right").clip(0, spec.n_values - 1)) + 1)
    return tuple(values)


def sample_objects(spec: EnvironmentSpec, n: int, rng: RngStream) -> np.ndarray:
    """Vectorized object sampling; returns (n, n_features) 0-based values."""
    out = np.empty((n, spec.n_features), dtype=np.int64)
    for f in range(spec.n_features):
        out[:, f] = rng.categorical(spec.probs[f], n)
    return out


def _sample_pairs(spec: EnvironmentSpec, n: int, rng: RngStream):
    targets = sample_objects(spec, n, rng.child("targets"))
    dis_rng = rng.child("distractors")
    distractors = sample_objects(spec, n, dis_rng)
    # the distractor is redrawn until it differs from its target
    while True:
        clash = np.nonzero((targets == distractors).all(axis=1))[0]
        if clash.size == 0:
            break
        distractors[clash] = sample_objects(spec, clash.size, dis_rng)
    labels = rng.child("order").integers(0, 2, n).astype(np.int64)
    return Split(targets, distractors, labels)


def build_dataset(spec: EnvironmentSpec, sizes: tuple[int, int, int], rng: RngStream) -> DatasetSplits:
    """Sample train/valid/test partitions of independently drawn game pairs."""
    if len(sizes) != 3 or any(s <= 0 for s in sizes):
        raise ValueError(f"sizes must be three positive counts, got {sizes}")
    if all(max(row) >= 1.0 - 1e-12 for row in spec.probs):
        raise ValueError("degenerate spec: only one distinct object exists, no valid distractor")
    splits = [_sample_pairs(spec, n, rng.child(name)) for name, n in zip(SPLIT_NAMES, sizes)]
    return DatasetSplits(spec, tuple(sizes), rng.seed, *splits)


def one_hot_encode(obj: ObjectVector, spec: EnvironmentSpec) -> np.ndarray:
    """Concatenate per-feature one-hot blocks into a flat encoding."""
    spec.validate_object(obj)
    out = np.zeros(spec.encoding_dim())
    for f, v in enumerate(obj):
        out[f * spec.n_values + (v - 1)] = 1.0
    return out


def encode_objects(values: np.ndarray, spec: EnvironmentSpec) -> np.ndarray:
    """Batch one-hot encoding of (n, n_features) 0-based value rows."""
    n = len(values)
    out = np.zeros((n, spec.encoding_dim()))
    cols = values + np.arange(spec.n_features) * spec.n_values
    out[np.arange(n)[:, None], cols] = 1.0
    return out


def object_codes(values: np.ndarray, spec: EnvironmentSpec) -> np.ndarray:
    """Map (n, n_features) 0-based rows to lexicographic object indices."""
    weights = spec.n_values ** np.arange(spec.n_features - 1, -1, -1)
    return values @ weights


def all_objects(spec: EnvironmentSpec) -> np.ndarray:
    """All objects in lexicographic order, as (n_objects, n_features) 0-based rows."""
    grids = np.meshgrid(*[np.arange(spec.n_values)] * spec.n_features, indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=1)


def _format_header(spec: EnvironmentSpec, sizes, seed: int, name: str, size: int) -> str:
    probs = ";".join(",".join(repr(float(p)) for p in row) for row in spec.probs)
    return (
        f"# {_DATASET_MAGIC} split={name} size={size} "
        f"sizes={sizes[0]},{sizes[1]},{sizes[2]} seed={seed} "
        f"n_features={spec.n_features} n_values={spec.n_values} probs={probs}"
    )


def write_split_file(path, splits: DatasetSplits, name: str) -> None:
    """Write one partition as line-oriented text; see README for the format."""
    part = splits.split(name)
    lines = [_format_header(splits.spec, splits.sizes, splits.seed, name, len(part))]
    for i in range(len(part)):
        t = " ".join(str(v + 1) for v in part.targets[i])
        d = " ".join(str(v + 1) for v in part.distractors[i])
        lines.append(f"{t} | {d} | {int(part.labels[i])} | {int(part.labels[i])}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_dataset_files(splits: DatasetSplits, out_dir, prefix: str = "dataset") -> list:
    """Write the three split files and return their paths."""
    import os

    paths = []
    for name in SPLIT_NAMES:
        path = os.path.join(str(out_dir), f"{prefix}.{name}.txt")
        write_split_file(path, splits, name)
        paths.append(path)
    return paths


def read_split_file(path) -> tuple[EnvironmentSpec, tuple[int, int, int], int, str, Split]:
    """Parse a dataset file back into its spec, sizes, seed, name and split."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith(f"# {_DATASET_MAGIC} "):
            raise ValueError(f"{path}: missing dataset header")
        fields = dict(
            item.split("=", 1) for item in header[len(f"# {_DATASET_MAGIC} ") :].split(" ")
        )
        n_features = int(fields["n_features"])
        n_values = int(fields["n_values"])
        probs = tuple(
            tuple(float(p) for p in row.split(",")) for row in fields["probs"].split(";")
        )
        spec = EnvironmentSpec(n_features, n_values, probs)
        sizes = tuple(int(s) for s in fields["sizes"].split(","))
        size = int(fields["size"])
        seed = int(fields["seed"])
        name = fields["split"]

        targets = np.empty((size, n_features), dtype=np.int64)
        distractors = np.empty((size, n_features), dtype=np.int64)
        labels = np.empty(size, dtype=np.int64)
        for i in range(size):
            line = fh.readline().rstrip("\n")
            t_part, d_part, order_part, label_part = (p.strip() for p in line.split("|"))
            targets[i] = [int(v) - 1 for v in t_part.split()]
            distractors[i] = [int(v) - 1 for v in d_part.split()]
            order, label = int(order_part), int(label_part)
            if order != label:
                raise ValueError(f"{path}:{i + 2}: label inconsistent with order")
            labels[i] = label
    split = Split(targets, distractors, labels)
    if (targets == distractors).all(axis=1).any():
        raise ValueError(f"{path}: contains a pair with target == distractor")
    return spec, sizes, seed, name, split
