"""Entropy, conditional entropy, and mutual information over discrete
empirical distributions, plus protocol statistics of a frozen model.

All quantities use the plug-in (maximum-likelihood) estimator in bits:
probabilities are raw count ratios and no bias correction is applied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .environment import EnvironmentSpec, Split, all_objects, encode_objects, object_codes
from .game import ReceiverAgent, SenderAgent, presented_onehots


def entropy(counts) -> float:
    """Plug-in entropy of a count vector, in bits; zero counts contribute 0."""
    c = np.asarray(counts, dtype=np.float64)
    if c.ndim != 1:
        raise ValueError("entropy expects a flat count vector")
    if np.any(c < 0):
        raise ValueError("counts must be non-negative")
    total = c.sum()
    if total == 0:
        raise ValueError("entropy needs at least one positive count")
    p = c[c > 0] / total
    return float(-(p * np.log2(p)).sum())


@dataclass(frozen=True)
class JointCounts:
    """Empirical joint counts indexed by (message symbol, feature value)."""

    table: np.ndarray  # (n_messages, n_values) non-negative integers

    def __post_init__(self):
        t = np.asarray(self.table)
        if t.ndim != 2:
            raise ValueError("joint table must be 2-D")
        if np.any(t < 0):
            raise ValueError("joint counts must be non-negative")
        if t.sum() == 0:
            raise ValueError("joint table must have at least one positive count")
        object.__setattr__(self, "table", t.astype(np.float64))

    @classmethod
    def from_pairs(cls, message_ids: np.ndarray, values: np.ndarray,
                   n_messages: int | None = None, n_values: int | None = None) -> "JointCounts":
        message_ids = np.asarray(message_ids)
        values = np.asarray(values)
        if message_ids.shape != values.shape:
            raise ValueError("message and value arrays must align")
        rows = n_messages or int(message_ids.max()) + 1
        cols = n_values or int(values.max()) + 1
        table = np.zeros((rows, cols))
        np.add.at(table, (message_ids, values), 1.0)
        return cls(table)

    @property
    def total(self) -> float:
        return float(self.table.sum())

    def message_marginal(self) -> np.ndarray:
        return self.table.sum(axis=1)

    def value_marginal(self) -> np.ndarray:
        return self.table.sum(axis=0)

    def transposed(self) -> "JointCounts":
        return JointCounts(self.table.T)


def conditional_entropy(joint: JointCounts) -> float:
    """H(value | message) = sum_m p(m) H(value | m), in bits."""
    table = joint.table
    n = joint.total
    row_totals = joint.message_marginal()
    out = 0.0
    for row, row_total in zip(table, row_totals):
        if row_total == 0:
            continue
        p_row = row[row > 0] / row_total
        out += (row_total / n) * float(-(p_row * np.log2(p_row)).sum())
    return out


def mutual_information(joint: JointCounts) -> float:
    """I(message; value) = H(value) - H(value | message), in bits."""
    return entropy(joint.value_marginal()) - conditional_entropy(joint)


@dataclass(frozen=True)
class RunMetrics:
    """Protocol statistics of one frozen model over a test split."""

    accuracy: float
    unique_messages: int
    message_entropy: float
    unique_targets: int
    target_entropy: float
    feature_mi: tuple[float, ...]
    converged: bool

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")
        if self.message_entropy < 0 or self.target_entropy < 0:
            raise ValueError("entropies must be non-negative")

    def to_flat_dict(self) -> dict:
        out = {
            "test_accuracy": self.accuracy,
            "unique_messages": self.unique_messages,
            "message_entropy_bits": self.message_entropy,
            "unique_targets": self.unique_targets,
            "target_entropy_bits": self.target_entropy,
            "converged": self.converged,
        }
        for i, mi in enumerate(self.feature_mi, start=1):
            out[f"mi_feature_{i}"] = mi
        return out

    @classmethod
    def from_flat_dict(cls, record: dict) -> "RunMetrics":
        n = sum(1 for k in record if k.startswith("mi_feature_"))
        return cls(
            accuracy=float(record["test_accuracy"]),
            unique_messages=int(record["unique_messages"]),
            message_entropy=float(record["message_entropy_bits"]),
            unique_targets=int(record["unique_targets"]),
            target_entropy=float(record["target_entropy_bits"]),
            feature_mi=tuple(float(record[f"mi_feature_{i}"]) for i in range(1, n + 1)),
            converged=bool(record["converged"]),
        )

    METRIC_KEYS = (
        "test_accuracy",
        "unique_messages",
        "message_entropy_bits",
        "unique_targets",
        "target_entropy_bits",
    )


def _message_codes(message_ids: np.ndarray) -> np.ndarray:
    """Map (n, L) message rows to compact ids over the distinct messages seen."""
    _, codes = np.unique(message_ids, axis=0, return_inverse=True)
    return codes.reshape(-1)


def protocol_stats(
    sender: SenderAgent,
    receiver: ReceiverAgent,
    test_split: Split,
    spec: EnvironmentSpec,
    convergence_threshold: float = 0.9,
) -> RunMetrics:
    """Greedy-protocol statistics over every test instance (with multiplicity).

    The sender's greedy message is computed per target occurrence; accuracy
    comes from the receiver's decisions on those messages over the presented
    pairs; entropies are plug-in estimates over the resulting multisets; the
    per-feature MI is computed from (message, feature value) joint counts.
    """
    target_oh, first_oh, second_oh, labels = presented_onehots(test_split, spec)
    messages = sender.greedy_messages(target_oh)
    choices = receiver.decide(messages, first_oh, second_oh)
    accuracy = float((choices == labels).mean())

    msg_codes = _message_codes(messages)
    n_messages = int(msg_codes.max()) + 1
    message_counts = np.bincount(msg_codes)
    target_counts = np.bincount(object_codes(test_split.targets, spec), minlength=spec.n_objects)

    feature_mi = []
    for f in range(spec.n_features):
        joint = JointCounts.from_pairs(
            msg_codes, test_split.targets[:, f], n_messages=n_messages, n_values=spec.n_values
        )
        feature_mi.append(mutual_information(joint))

    return RunMetrics(
        accuracy=accuracy,
        unique_messages=n_messages,
        message_entropy=entropy(message_counts),
        unique_targets=int((target_counts > 0).sum()),
        target_entropy=entropy(target_counts[target_counts > 0]),
        feature_mi=tuple(feature_mi),
        converged=accuracy >= convergence_threshold,
    )


def message_table(sender: SenderAgent, spec: EnvironmentSpec) -> tuple[np.ndarray, np.ndarray]:
    """Greedy symbol(s) for every object, in lexicographic object order.

    Returns (objects, messages): (n_objects, n_features) 1-based values and
    (n_objects, L) symbol ids.
    """
    objects = all_objects(spec)
    messages = sender.greedy_messages(encode_objects(objects, spec))
    return objects + 1, messages


def dump_message_table(sender: SenderAgent, spec: EnvironmentSpec, path) -> None:
    """Write the full object-to-symbol table as TSV: `v1 .. vF <tab> symbol`."""
    objects, messages = message_table(sender, spec)
    with open(path, "w", encoding="utf-8") as fh:
        for obj, msg in zip(objects, messages):
            values = " ".join(str(int(v)) for v in obj)
            symbol = ",".join(str(int(s)) for s in msg)
            fh.write(f"{values}\t{symbol}\n")
