"""Experiment configuration, the training loop, multi-seed orchestration, and
aggregation of per-run metrics into summary tables.

A run is fully determined by (config, dataset seed, network seed): dataset
content derives only from the dataset seed, while initialization, shuffling
and channel noise derive only from the network seed. Sweeps are therefore
embarrassingly parallel and their results independent of execution order.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import backward
from .checkpoint import load_checkpoint, save_checkpoint
from .environment import EnvironmentSpec, build_dataset
from .game import ChannelConfig, ReceiverAgent, SenderAgent, game_batch_loss, presented_onehots
from .infotheory import RunMetrics, protocol_stats
from .layers import AdamState, NonFiniteGradient, adam_step
from .rng import RngStream

RECORD_FORMAT = "refgame-run-record"
RECORD_VERSION = 1

PRESETS = ("uniform", "skewed", "custom")


class InvalidConfig(ValueError):
    """Configuration failed validation (CLI exit code 1)."""


class NoConvergedRuns(RuntimeError):
    """Aggregation was asked for with zero converged runs (CLI exit code 2)."""


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "uniform"
    probs_file: str | None = None
    n_features: int = 5
    n_values: int = 4
    train_size: int = 128000
    valid_size: int = 16000
    test_size: int = 4000
    vocab_size: int = 1100
    message_length: int = 1
    hidden_size: int = 50
    embed_dim: int = 10
    temperature: float = 1.0
    straight_through: bool = True
    batch_size: int = 64
    sender_lr: float = 0.001
    receiver_lr: float = 0.001
    epochs: int = 50
    convergence_threshold: float = 0.9
    dataset_seeds: tuple[int, ...] = (1, 2)
    network_seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    output_dir: str = "runs"
    workers: int = 1

    # fields that define a run's behavior given its two seeds; execution
    # details (seed lists, paths, parallelism) stay out of the fingerprint
    SEMANTIC_FIELDS = (
        "preset", "probs_file", "n_features", "n_values",
        "train_size", "valid_size", "test_size",
        "vocab_size", "message_length", "hidden_size", "embed_dim",
        "temperature", "straight_through",
        "batch_size", "sender_lr", "receiver_lr", "epochs",
        "convergence_threshold",
    )

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise InvalidConfig(f"unknown preset {self.preset!r}; expected one of {PRESETS}")
        if self.preset == "custom" and not self.probs_file:
            raise InvalidConfig("custom preset requires probs_file")
        positive = (
            "n_features", "n_values", "train_size", "valid_size", "test_size",
            "vocab_size", "message_length", "hidden_size", "embed_dim",
            "temperature", "batch_size", "sender_lr", "receiver_lr",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise InvalidConfig(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise InvalidConfig("epochs must be non-negative")
        if not 0.0 <= self.convergence_threshold <= 1.0:
            raise InvalidConfig("convergence_threshold must lie in [0, 1]")
        if not self.dataset_seeds or not self.network_seeds:
            raise InvalidConfig("seed lists must be non-empty")
        if self.workers < 1:
            raise InvalidConfig("workers must be at least 1")

    def fingerprint(self) -> str:
        parts = [f"{name}={getattr(self, name)!r}" for name in self.SEMANTIC_FIELDS]
        return hashlib.sha256(";".join(parts).encode("utf-8")).hexdigest()[:16]

    def environment_spec(self) -> EnvironmentSpec:
        if self.preset == "uniform":
            return EnvironmentSpec.uniform(self.n_features, self.n_values)
        if self.preset == "skewed":
            return EnvironmentSpec.skewed(self.n_features, self.n_values)
        probs = _read_probs_file(self.probs_file)
        return EnvironmentSpec(self.n_features, self.n_values, probs)

    def channel(self) -> ChannelConfig:
        return ChannelConfig(self.temperature, self.straight_through)

    def sizes(self) -> tuple[int, int, int]:
        return (self.train_size, self.valid_size, self.test_size)

    def replace(self, **kwargs) -> "ExperimentConfig":
        return dataclasses.replace(self, **kwargs)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["dataset_seeds"] = list(self.dataset_seeds)
        out["network_seeds"] = list(self.network_seeds)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        kwargs = dict(data)
        for key in ("dataset_seeds", "network_seeds"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def _read_probs_file(path) -> tuple[tuple[float, ...], ...]:
    """One line per feature: whitespace- or comma-separated probabilities."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            rows.append(tuple(float(x) for x in line.replace(",", " ").split()))
    if not rows:
        raise InvalidConfig(f"{path}: no probability rows found")
    return tuple(rows)


@dataclass
class RunRecord:
    """Everything one training run produced."""

    config_fingerprint: str
    preset: str
    dataset_seed: int
    network_seed: int
    epochs_completed: int
    train_loss_curve: list[float]
    valid_accuracy_curve: list[float]
    metrics: RunMetrics | None
    wall_clock_seconds: float
    converged: bool
    non_finite_loss: bool
    error: str | None = None

    def to_json_dict(self) -> dict:
        return {
            "format": RECORD_FORMAT,
            "version": RECORD_VERSION,
            "config_fingerprint": self.config_fingerprint,
            "preset": self.preset,
            "dataset_seed": self.dataset_seed,
            "network_seed": self.network_seed,
            "epochs_completed": self.epochs_completed,
            "train_loss_curve": self.train_loss_curve,
            "valid_accuracy_curve": self.valid_accuracy_curve,
            "metrics": None if self.metrics is None else self.metrics.to_flat_dict(),
            "wall_clock_seconds": self.wall_clock_seconds,
            "converged": self.converged,
            "non_finite_loss": self.non_finite_loss,
            "error": self.error,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "RunRecord":
        if data.get("format") != RECORD_FORMAT:
            raise ValueError(f"not a {RECORD_FORMAT} document")
        metrics = data.get("metrics")
        return cls(
            config_fingerprint=data["config_fingerprint"],
            preset=data["preset"],
            dataset_seed=int(data["dataset_seed"]),
            network_seed=int(data["network_seed"]),
            epochs_completed=int(data["epochs_completed"]),
            train_loss_curve=[float(x) for x in data["train_loss_curve"]],
            valid_accuracy_curve=[float(x) for x in data["valid_accuracy_curve"]],
            metrics=None if metrics is None else RunMetrics.from_flat_dict(metrics),
            wall_clock_seconds=float(data["wall_clock_seconds"]),
            converged=bool(data["converged"]),
            non_finite_loss=bool(data["non_finite_loss"]),
            error=data.get("error"),
        )


def records_equivalent(a: RunRecord, b: RunRecord) -> bool:
    """Equality up to wall-clock time, the one field timing makes unrepeatable."""
    da, db = a.to_json_dict(), b.to_json_dict()
    da.pop("wall_clock_seconds")
    db.pop("wall_clock_seconds")
    return da == db


def save_run_record(path, record: RunRecord) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record.to_json_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_run_record(path) -> RunRecord:
    with open(path, "r", encoding="utf-8") as fh:
        return RunRecord.from_json_dict(json.load(fh))


def record_filename(record: RunRecord) -> str:
    return f"run_{record.preset}_d{record.dataset_seed}_n{record.network_seed}.json"


def init_agents(config: ExperimentConfig, spec: EnvironmentSpec, network_seed: int):
    net_rng = RngStream(network_seed).child("network")
    sender = SenderAgent.init(
        spec, config.vocab_size, config.hidden_size, config.embed_dim,
        config.message_length, net_rng.child("sender"),
    )
    receiver = ReceiverAgent.init(
        spec, config.vocab_size, config.hidden_size, config.embed_dim,
        net_rng.child("receiver"),
    )
    return sender, receiver


def _validation_accuracy(sender, receiver, onehots) -> float:
    target_oh, first_oh, second_oh, labels = onehots
    messages = sender.greedy_messages(target_oh)
    return float((receiver.decide(messages, first_oh, second_oh) == labels).mean())


def train_run(config: ExperimentConfig, dataset_seed: int, network_seed: int) -> RunRecord:
    """Train one (dataset seed, network seed) run and evaluate its protocol."""
    record, _, _ = train_run_with_agents(config, dataset_seed, network_seed)
    return record


def train_run_with_agents(
    config: ExperimentConfig, dataset_seed: int, network_seed: int
) -> tuple[RunRecord, SenderAgent, ReceiverAgent]:
    """As train_run, but also hands back the trained agents (for checkpointing)."""
    config.validate()
    started = time.perf_counter()
    spec = config.environment_spec()
    splits = build_dataset(spec, config.sizes(), RngStream(dataset_seed).child("dataset"))

    sender, receiver = init_agents(config, spec, network_seed)
    net_rng = RngStream(network_seed).child("network")
    shuffle_rng = net_rng.child("shuffle")
    noise_rng = net_rng.child("channel")
    channel = config.channel()

    sender_params, receiver_params = sender.params(), receiver.params()
    sender_state = AdamState.for_params(sender_params)
    receiver_state = AdamState.for_params(receiver_params)

    train_oh = presented_onehots(splits.train, spec)
    valid_oh = presented_onehots(splits.valid, spec)
    target_oh, first_oh, second_oh, labels = train_oh
    n = len(labels)
    batch = config.batch_size

    train_curve: list[float] = []
    valid_curve: list[float] = []
    non_finite = False
    epochs_completed = 0

    for _ in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, batch):
            idx = perm[lo : lo + batch]
            loss, _ = game_batch_loss(
                sender, receiver,
                target_oh[idx], first_oh[idx], second_oh[idx], labels[idx],
                channel, rng=noise_rng,
            )
            if not np.isfinite(loss.data).all():
                non_finite = True
                break
            backward(loss)
            try:
                adam_step(sender_params, None, sender_state, config.sender_lr)
                adam_step(receiver_params, None, receiver_state, config.receiver_lr)
            except NonFiniteGradient:
                non_finite = True
                break
            epoch_loss += loss.item() * len(idx)
        if non_finite:
            break
        epochs_completed += 1
        train_curve.append(epoch_loss / n)
        valid_curve.append(_validation_accuracy(sender, receiver, valid_oh))

    metrics = protocol_stats(sender, receiver, splits.test, spec, config.convergence_threshold)
    record = RunRecord(
        config_fingerprint=config.fingerprint(),
        preset=config.preset,
        dataset_seed=dataset_seed,
        network_seed=network_seed,
        epochs_completed=epochs_completed,
        train_loss_curve=train_curve,
        valid_accuracy_curve=valid_curve,
        metrics=metrics,
        wall_clock_seconds=time.perf_counter() - started,
        converged=metrics.converged and not non_finite,
        non_finite_loss=non_finite,
    )
    return record, sender, receiver


def _failed_record(config: ExperimentConfig, dataset_seed: int, network_seed: int,
                   error: Exception) -> RunRecord:
    return RunRecord(
        config_fingerprint=config.fingerprint(),
        preset=config.preset,
        dataset_seed=dataset_seed,
        network_seed=network_seed,
        epochs_completed=0,
        train_loss_curve=[],
        valid_accuracy_curve=[],
        metrics=None,
        wall_clock_seconds=0.0,
        converged=False,
        non_finite_loss=False,
        error=f"{type(error).__name__}: {error}",
    )


def _sweep_worker(args: tuple) -> dict:
    config_dict, dataset_seed, network_seed = args
    config = ExperimentConfig.from_dict(config_dict)
    try:
        record = train_run(config, dataset_seed, network_seed)
    except Exception as error:  # a failed run is recorded, never fatal
        record = _failed_record(config, dataset_seed, network_seed, error)
    return record.to_json_dict()


def run_sweep(config: ExperimentConfig, out_dir=None, workers: int | None = None) -> tuple[list[RunRecord], "SummaryTable"]:
    """Run the full dataset-seed x network-seed grid, optionally in parallel.

    Each run derives its randomness from its own seeds only, so results are
    independent of worker count and completion order. Individual failures are
    recorded as non-converged records. Raises NoConvergedRuns if nothing
    converged.
    """
    config.validate()
    workers = config.workers if workers is None else workers
    jobs = [
        (config.to_dict(), ds, ns)
        for ds in config.dataset_seeds
        for ns in config.network_seeds
    ]
    if workers > 1 and len(jobs) > 1:
        import multiprocessing as mp

        from . import _worker_env

        ctx = mp.get_context("spawn")
        with ctx.Pool(min(workers, len(jobs)), initializer=_worker_env.limit_blas_threads) as pool:
            raw = pool.map(_sweep_worker, jobs)
        records = [RunRecord.from_json_dict(r) for r in raw]
    else:
        records = []
        for job in jobs:
            records.append(RunRecord.from_json_dict(_sweep_worker(job)))
    records.sort(key=lambda r: (r.dataset_seed, r.network_seed))

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for record in records:
            save_run_record(os.path.join(out_dir, record_filename(record)), record)

    summary = aggregate(records)
    return records, summary


@dataclass
class SummaryTable:
    """Mean and sample standard deviation of every metric over converged runs."""

    preset: str
    n_runs: int
    n_converged: int
    means: dict[str, float]
    stds: dict[str, float]

    def metric_names(self) -> list[str]:
        return list(self.means)


def aggregate(records: list[RunRecord]) -> SummaryTable:
    """Field-wise mean/std over converged records; divergent runs are excluded
    (their count is reported). Uses the sample (n-1) convention, 0 for n=1."""
    if not records:
        raise NoConvergedRuns("no records to aggregate")
    presets = {r.preset for r in records}
    if len(presets) != 1:
        raise ValueError(f"records mix presets {sorted(presets)}; aggregate one preset at a time")
    converged = [r for r in records if r.converged and r.metrics is not None]
    if not converged:
        raise NoConvergedRuns(f"0 of {len(records)} runs converged; nothing to aggregate")

    flats = [r.metrics.to_flat_dict() for r in converged]
    names = [k for k in flats[0] if k != "converged"]
    means, stds = {}, {}
    for name in names:
        values = np.array([f[name] for f in flats], dtype=np.float64)
        means[name] = float(values.mean())
        stds[name] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return SummaryTable(
        preset=presets.pop(),
        n_runs=len(records),
        n_converged=len(converged),
        means=means,
        stds=stds,
    )


def write_summary_csv(tables: list[SummaryTable], path) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["preset", "metric", "mean", "std", "n_runs", "n_converged"])
        for table in tables:
            for metric in table.metric_names():
                writer.writerow([
                    table.preset, metric,
                    repr(table.means[metric]), repr(table.stds[metric]),
                    table.n_runs, table.n_converged,
                ])


def read_summary_csv(path) -> list[SummaryTable]:
    import csv

    grouped: dict[str, SummaryTable] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            table = grouped.setdefault(
                row["preset"],
                SummaryTable(row["preset"], int(row["n_runs"]), int(row["n_converged"]), {}, {}),
            )
            table.means[row["metric"]] = float(row["mean"])
            table.stds[row["metric"]] = float(row["std"])
    return list(grouped.values())


def save_agents_checkpoint(path, sender: SenderAgent, receiver: ReceiverAgent,
                           config: ExperimentConfig, dataset_seed: int, network_seed: int) -> None:
    params = {**sender.named_params(), **receiver.named_params()}
    meta = {
        "config": {name: getattr(config, name) for name in ExperimentConfig.SEMANTIC_FIELDS},
        "dataset_seed": dataset_seed,
        "network_seed": network_seed,
    }
    save_checkpoint(path, params, meta)


def load_agents_checkpoint(path) -> tuple[SenderAgent, ReceiverAgent, ExperimentConfig, int, int]:
    params, meta = load_checkpoint(path)
    config = ExperimentConfig(**meta["config"])
    spec = config.environment_spec()
    sender, receiver = init_agents(config, spec, meta["network_seed"])
    for name, tensor in {**sender.named_params(), **receiver.named_params()}.items():
        tensor[...] = params[name]
    return sender, receiver, config, meta["dataset_seed"], meta["network_seed"]
