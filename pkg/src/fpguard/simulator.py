"""Federated round loop: partition, local training, attacks, aggregation, metrics."""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .attacks import AttackChoice, RoundContext, apply_attack
from .baselines import (
    AggregatorChoice,
    FoolsGold,
    coord_median,
    fedavg_mean,
    krum,
    pairwise_sq_distances,
    trimmed_mean,
)
from .data import Dataset, Partition, dirichlet_partition, flip_labels, generate_synthetic, load_idx
from .detector import DetectorConfig, detect, tinyguard_aggregate
from .errors import ConfigurationError
from .fingerprint import extract_fingerprint
from .model import GradientUpdate, ModelParams, apply_update, evaluate, init_params, local_train

# Named random streams derived from the master seed.
SEED_STREAMS = ("data", "partition", "init", "byzantine", "batching", "attack")


def sub_seed(master: int, name: str) -> int:
    """Independent 32-bit seed for one named component of a run."""
    if name not in SEED_STREAMS:
        raise ConfigurationError(f"unknown seed stream {name!r}")
    return int(np.random.SeedSequence([int(master), SEED_STREAMS.index(name)]).generate_state(1)[0])


@dataclass(frozen=True)
class DataSource:
    """Either IDX files on disk or a synthetic Gaussian-cluster task."""

    kind: str = "synthetic"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    num_examples: int = 10000
    test_examples: int = 2000
    input_dim: int = 100
    num_classes: int = 10
    separation: float = 8.0
    noise: float = 0.25

    def __post_init__(self):
        if self.kind not in ("synthetic", "idx"):
            raise ConfigurationError(f"data kind must be 'synthetic' or 'idx', got {self.kind!r}")
        if self.kind == "idx":
            paths = (self.train_images, self.train_labels, self.test_images, self.test_labels)
            if any(p is None for p in paths):
                raise ConfigurationError("idx data needs train_images, train_labels, test_images and test_labels")
        elif min(self.num_examples, self.test_examples, self.input_dim, self.num_classes) < 1:
            raise ConfigurationError("synthetic data sizes must all be >= 1")

    def load(self, seed: int) -> tuple[Dataset, Dataset]:
        if self.kind == "idx":
            train = load_idx(self.train_images, self.train_labels)
            test = load_idx(self.test_images, self.test_labels, train.num_classes)
            return train, test
        full = generate_synthetic(
            self.num_examples + self.test_examples, self.input_dim, self.num_classes, seed,
            separation=self.separation, noise=self.noise,
        )
        n = self.num_examples
        return full.subset(np.arange(n)), full.subset(np.arange(n, len(full)))


@dataclass(frozen=True)
class ExperimentConfig:
    n_clients: int = 50
    byzantine_fraction: float = 0.2
    attack: AttackChoice = field(default_factory=AttackChoice)
    defense: AggregatorChoice = field(default_factory=AggregatorChoice)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    dirichlet_alpha: float = 0.5
    rounds: int = 50
    eta: float = 0.05
    local_epochs: int = 1
    batch_size: int = 32
    hidden_widths: tuple[int, ...] = (64,)
    weighted_fedavg: bool = False
    data: DataSource = field(default_factory=DataSource)
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ConfigurationError("n_clients must be >= 1")
        if not 0 <= self.byzantine_fraction < 0.5:
            raise ConfigurationError(
                f"byzantine_fraction must be in [0, 0.5): the threat model allows fewer than half "
                f"of the clients to be Byzantine (got {self.byzantine_fraction})"
            )
        if not self.dirichlet_alpha > 0:
            raise ConfigurationError("dirichlet_alpha must be > 0")
        if self.rounds < 0 or self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("need rounds >= 0, local_epochs >= 1, batch_size >= 1")
        if not self.eta > 0:
            raise ConfigurationError("eta must be > 0")
        if any(w < 1 for w in self.hidden_widths):
            raise ConfigurationError("hidden widths must be >= 1")
        self.defense.check_clients(self.n_clients)

    @property
    def byzantine_count(self) -> int:
        return math.floor(self.byzantine_fraction * self.n_clients)

    def widths(self, input_dim: int, num_classes: int) -> tuple[int, ...]:
        return (input_dim, *self.hidden_widths, num_classes)


@dataclass
class RoundMetrics:
    round: int
    test_accuracy: float
    test_loss: float
    detection_precision: float | None  # None: nothing flagged
    detection_recall: float | None  # None: no Byzantine clients or no detector
    flagged_count: int
    trusted_count: int
    timings: dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timings: bool = True) -> dict:
        out = asdict(self)
        if not include_timings:
            out.pop("timings")
        return out


@dataclass
class ExperimentResult:
    config: dict
    rounds: list[RoundMetrics]
    initial_accuracy: float
    final_accuracy: float
    final_loss: float
    mean_precision: float | None
    total_runtime_s: float
    byzantine_ids: list[int] = field(default_factory=list)

    def to_dict(self, include_timings: bool = False) -> dict:
        """Serializable form. Wall-clock fields are left out by default so
        the document depends only on config and seed."""
        out = {
            "config": self.config,
            "byzantine_ids": self.byzantine_ids,
            "initial_accuracy": self.initial_accuracy,
            "final_accuracy": self.final_accuracy,
            "final_loss": self.final_loss,
            "mean_precision": self.mean_precision,
            "rounds": [m.to_dict(include_timings) for m in self.rounds],
        }
        if include_timings:
            out["total_runtime_s"] = self.total_runtime_s
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


@dataclass
class SimulationState:
    params: ModelParams
    train: Dataset
    test: Dataset
    partitions: list[Partition]
    client_labels: list[np.ndarray]
    byzantine: frozenset[int]
    round_index: int = 0
    foolsgold: FoolsGold | None = None
    last_updates: list[GradientUpdate] | None = None
    last_flagged: frozenset[int] = frozenset()


def assign_byzantine(n: int, fraction: float, seed: int) -> frozenset[int]:
    """floor(fraction * n) distinct client ids drawn uniformly."""
    if not 0 <= fraction < 0.5:
        raise ConfigurationError(f"byzantine fraction must be in [0, 0.5), got {fraction}")
    count = math.floor(fraction * n)
    rng = np.random.default_rng(seed)
    return frozenset(int(i) for i in rng.choice(n, size=count, replace=False))


def detection_scores(flagged, byzantine) -> tuple[float | None, float | None]:
    """(precision, recall) of a flagged set; None where the ratio is undefined."""
    flagged, byzantine = set(flagged), set(byzantine)
    hits = len(flagged & byzantine)
    precision = hits / len(flagged) if flagged else None
    recall = hits / len(byzantine) if byzantine else None
    return precision, recall


def init_state(config: ExperimentConfig) -> SimulationState:
    seed = config.seed
    train, test = config.data.load(sub_seed(seed, "data"))
    if train.input_dim != test.input_dim:
        raise ConfigurationError("train and test inputs have different widths")
    partitions = dirichlet_partition(train, config.n_clients, config.dirichlet_alpha, sub_seed(seed, "partition"))
    byzantine = assign_byzantine(config.n_clients, config.byzantine_fraction, sub_seed(seed, "byzantine"))
    labels = []
    for p in partitions:
        if config.attack.kind == "label_flip" and p.client_id in byzantine:
            labels.append(flip_labels(train, p))
        else:
            labels.append(train.labels[p.example_indices])
    params = init_params(config.widths(train.input_dim, train.num_classes), sub_seed(seed, "init"))
    fg = FoolsGold(config.defense.foolsgold_window) if config.defense.kind == "foolsgold" else None
    return SimulationState(params, train, test, partitions, labels, byzantine, foolsgold=fg)


def _train_client(state: SimulationState, config: ExperimentConfig, k: int) -> GradientUpdate:
    p = state.partitions[k]
    rng = np.random.default_rng([sub_seed(config.seed, "batching"), state.round_index, k])
    return local_train(
        state.params, state.train.inputs[p.example_indices], state.client_labels[k],
        config.eta, config.local_epochs, config.batch_size, rng, client_id=k,
    )


def aggregate(gradients, config: ExperimentConfig, foolsgold_state: FoolsGold | None = None):
    """Apply the configured defense. Returns (aggregate, flagged set or None, timings)."""
    choice = config.defense
    n = len(gradients)
    t0 = time.perf_counter()
    if choice.kind == "tinyguard":
        agg, report = tinyguard_aggregate(gradients, config.detector)
        return agg, set(report.flagged), dict(report.timings)
    if choice.kind == "fedavg":
        weights = [g.sample_count for g in gradients] if config.weighted_fedavg else None
        agg = fedavg_mean(gradients, weights)
    elif choice.kind in ("krum", "multikrum"):
        agg = krum(gradients, choice.resolved_f(n), choice.resolved_m(n))
    elif choice.kind == "trimmed_mean":
        agg = trimmed_mean(gradients, choice.trim_fraction)
    elif choice.kind == "coord_median":
        agg = coord_median(gradients)
    else:
        if foolsgold_state is None:
            raise ConfigurationError("foolsgold needs its history state")
        agg = foolsgold_state.aggregate(gradients)
    ms = 1e3 * (time.perf_counter() - t0)
    return agg, None, {"extraction_ms": 0.0, "scoring_ms": 0.0, "aggregation_ms": ms}


def run_round(state: SimulationState, config: ExperimentConfig, workers: int = 1):
    """One federated round. Returns ``(new_state, metrics)``.

    Each client's batching stream is keyed by (round, client), so results do
    not depend on ``workers``. A FoolsGold history, if any, is carried over
    by reference.
    """
    t0 = time.perf_counter()
    ks = range(config.n_clients)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            updates = list(pool.map(lambda k: _train_client(state, config, k), ks))
    else:
        updates = [_train_client(state, config, k) for k in ks]
    train_ms = 1e3 * (time.perf_counter() - t0)

    ctx = RoundContext(updates, state.round_index, sub_seed(config.seed, "attack"))
    submitted = apply_attack(ctx, config.attack, state.byzantine)
    agg, flagged, timings = aggregate(submitted, config, state.foolsgold)
    params = apply_update(state.params, agg, config.eta)
    acc, loss_value = evaluate(params, state.test)

    if flagged is None:
        precision = recall = None
        flagged = set()
    else:
        precision, recall = detection_scores(flagged, state.byzantine)
    timings["local_training_ms"] = train_ms
    metrics = RoundMetrics(
        round=state.round_index + 1,
        test_accuracy=acc,
        test_loss=loss_value,
        detection_precision=precision,
        detection_recall=recall,
        flagged_count=len(flagged),
        trusted_count=config.n_clients - len(flagged),
        timings=timings,
    )
    new_state = replace(
        state, params=params, round_index=state.round_index + 1,
        last_updates=submitted, last_flagged=frozenset(flagged),
    )
    return new_state, metrics


def mean_defined(values) -> float | None:
    kept = [v for v in values if v is not None]
    return float(np.mean(kept)) if kept else None


def run_experiment(config: ExperimentConfig, workers: int = 1, on_round=None) -> ExperimentResult:
    """Run every configured round. ``on_round(state, metrics)`` is called after each."""
    from .config import config_to_dict

    start = time.perf_counter()
    state = init_state(config)
    acc0, loss0 = evaluate(state.params, state.test)
    rounds = []
    for _ in range(config.rounds):
        state, metrics = run_round(state, config, workers)
        rounds.append(metrics)
        if on_round is not None:
            on_round(state, metrics)
    final_acc, final_loss = (rounds[-1].test_accuracy, rounds[-1].test_loss) if rounds else (acc0, loss0)
    return ExperimentResult(
        config=config_to_dict(config),
        rounds=rounds,
        initial_accuracy=acc0,
        final_accuracy=final_acc,
        final_loss=final_loss,
        mean_precision=mean_defined(m.detection_precision for m in rounds),
        total_runtime_s=time.perf_counter() - start,
        byzantine_ids=sorted(state.byzantine),
    )


ROUND_CSV_COLUMNS = (
    "round", "test_accuracy", "test_loss", "detection_precision", "detection_recall",
    "flagged_count", "trusted_count", "extraction_ms", "scoring_ms", "aggregation_ms", "local_training_ms",
)


def write_result(result: ExperimentResult, directory) -> Path:
    """Write result.json (deterministic), rounds.csv and timing.json into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "rounds.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROUND_CSV_COLUMNS)
        for m in result.rounds:
            row = [m.round, m.test_accuracy, m.test_loss, m.detection_precision, m.detection_recall,
                   m.flagged_count, m.trusted_count]
            row += [m.timings.get(c, 0.0) for c in ROUND_CSV_COLUMNS[7:]]
            w.writerow(["NA" if v is None else v for v in row])
    timing = {"total_runtime_s": result.total_runtime_s, "rounds": [m.timings for m in result.rounds]}
    (directory / "timing.json").write_text(json.dumps(timing, indent=1))
    # written last: its presence marks the experiment as complete
    path = directory / "result.json"
    path.write_text(result.to_json())
    return path


def runtime_scaling_probe(
    n_values=(50, 100, 200),
    d: int = 50890,
    kinds=("tinyguard", "krum"),
    repetitions: int = 5,
    seed: int = 0,
    detector: DetectorConfig = DetectorConfig(),
) -> list[dict]:
    """Median wall time per (n, defense) on random gradients.

    ``tinyguard`` times detection on precomputed fingerprints,
    ``tinyguard_extraction`` times fingerprint extraction alone, and
    ``krum`` times the pairwise-distance scoring and selection.
    """
    from .model import LayerLayout

    if repetitions < 1:
        raise ConfigurationError("repetitions must be >= 1")
    half = d // 2
    layout = LayerLayout.from_lengths([half, d - half])
    rng = np.random.default_rng(seed)
    rows = []
    for n in n_values:
        grads = [GradientUpdate(rng.normal(size=d), layout, i) for i in range(n)]
        fps = [extract_fingerprint(g, detector.epsilon, detector.k) for g in grads]
        for kind in kinds:
            times = []
            for _ in range(repetitions):
                t0 = time.perf_counter()
                if kind == "tinyguard":
                    detect(fps, detector.lam, detector.standardize_features)
                elif kind == "tinyguard_extraction":
                    [extract_fingerprint(g, detector.epsilon, detector.k) for g in grads]
                elif kind == "krum":
                    krum(grads, AggregatorChoice("krum").resolved_f(n))
                elif kind == "pairwise_only":
                    pairwise_sq_distances(np.vstack([g.values for g in grads]))
                else:
                    raise ConfigurationError(f"unknown probe kind {kind!r}")
                times.append(time.perf_counter() - t0)
            rows.append({"n": int(n), "defense": kind, "median_ms": 1e3 * float(np.median(times))})
    return rows
