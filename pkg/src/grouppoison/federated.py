"""Federated training simulator with FedAvg and robust aggregation rules."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DomainError
from .metrics import asr_dlbd, wga
from .model import SGD, ModelParams, TrainConfig, evaluate
from .synth_data import IID, Dataset, NonIID, partition_clients


class AggregatorKind(str, Enum):
    FEDAVG = "fedavg"
    MEDIAN = "median"
    TRIMMED_MEAN = "trimmed_mean"
    SPARSEFED = "sparsefed"


@dataclass(frozen=True)
class Aggregator:
    kind: AggregatorKind = AggregatorKind.FEDAVG
    trim_k: int = 2
    keep_fraction: float = 0.05
    keep_k: int | None = None
    momentum: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "kind", AggregatorKind(self.kind))
        if self.trim_k < 0:
            raise ConfigurationError("trim k must be non-negative", "aggregator.trim_k")
        if self.keep_k is not None and self.keep_k < 1:
            raise ConfigurationError("keep k must be at least 1", "aggregator.keep_k")
        if not 0 < self.keep_fraction <= 1:
            raise ConfigurationError("keep fraction must lie in (0, 1]", "aggregator.keep_fraction")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)", "aggregator.momentum")

    def keep(self, n_params: int) -> int:
        return self.keep_k if self.keep_k is not None else max(1, math.floor(self.keep_fraction * n_params))

    @property
    def name(self) -> str:
        return self.kind.value


@dataclass(frozen=True)
class ClientUpdate:
    delta: np.ndarray
    client: int
    n_samples: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.delta)):
            raise DomainError("client update has non-finite entries")


def _stack(updates: Sequence[ClientUpdate] | np.ndarray) -> np.ndarray:
    if isinstance(updates, np.ndarray):
        U = np.atleast_2d(updates).astype(float)
    else:
        U = np.stack([u.delta for u in updates]).astype(float) if len(updates) else np.zeros((0, 0))
    if len(U) == 0:
        raise DomainError("at least one update is required")
    if len({len(r) for r in U}) != 1:
        raise DomainError("updates differ in length")
    return U


def _mean_rows(S: np.ndarray) -> np.ndarray:
    # shifted by the first row so that identical rows average back exactly
    ref = S[0]
    return ref + (S - ref).sum(axis=0) / len(S)


def aggregate_fedavg(updates) -> np.ndarray:
    return _mean_rows(_stack(updates))


def aggregate_median(updates) -> np.ndarray:
    """Coordinate-wise median; mean of the two middle values for even counts."""
    return np.median(_stack(updates), axis=0)


def aggregate_trimmed_mean(updates, k: int) -> np.ndarray:
    """Coordinate-wise mean after dropping the ``k`` smallest and ``k`` largest values."""
    U = _stack(updates)
    if k < 0 or 2 * k >= len(U):
        raise ConfigurationError(f"cannot trim {k} from each side of {len(U)} updates", "aggregator.trim_k")
    S = np.sort(U, axis=0)
    return _mean_rows(S[k:len(S) - k])


@dataclass
class SparseFedState:
    momentum: np.ndarray
    residual: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "SparseFedState":
        return cls(np.zeros(n), np.zeros(n))


def top_k_mask(v: np.ndarray, k: int) -> np.ndarray:
    """Mask of the ``k`` largest ``|v|`` entries; ties go to the lowest index."""
    order = np.argsort(-np.abs(v), kind="stable")
    mask = np.zeros(len(v), dtype=bool)
    mask[order[:k]] = True
    return mask


def aggregate_sparsefed(updates, k: int, rho: float, state: SparseFedState | None = None) -> tuple[np.ndarray, SparseFedState, np.ndarray]:
    """Top-k of ``v = u + residual`` where ``u <- rho u + mean(updates)``.

    Returns the emitted update, the new state and the accumulated vector
    ``v`` (so that ``emitted + residual == v``).
    """
    U = _stack(updates)
    n = U.shape[1]
    if not 1 <= k <= n:
        raise ConfigurationError(f"keep k must lie in [1, {n}]", "aggregator.keep_k")
    state = state or SparseFedState.zeros(n)
    # momentum and error feedback are kept apart so the residual is not compounded
    u = rho * state.momentum + _mean_rows(U)
    v = u + state.residual
    mask = top_k_mask(v, k)
    emitted = np.where(mask, v, 0.0)
    residual = np.where(mask, 0.0, v)
    return emitted, SparseFedState(u, residual), v


@dataclass(frozen=True)
class FLConfig:
    n_clients: int = 100
    participation: float = 0.1
    rounds: int = 30
    local_epochs: int = 10
    local: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.03, weight_decay=1e-4, batch_size=32))
    aggregator: Aggregator = field(default_factory=Aggregator)
    partition: NonIID | str = field(default_factory=NonIID)
    hidden: int = 32

    def __post_init__(self):
        if self.n_clients < 1:
            raise ConfigurationError("at least one client is required", "federated.n_clients")
        if not 0 < self.participation <= 1:
            raise ConfigurationError("participation must lie in (0, 1]", "federated.participation")
        if not isinstance(self.partition, NonIID) and self.partition != IID:
            raise ConfigurationError(f"unknown partition {self.partition!r}", "federated.partition")
        if self.rounds < 0 or self.local_epochs < 0:
            raise ConfigurationError("rounds and local epochs must be non-negative", "federated.rounds")

    @property
    def per_round(self) -> int:
        return max(1, math.ceil(round(self.participation * self.n_clients, 9)))


def select_clients(n_clients: int, m: int, seed: int, round_index: int) -> np.ndarray:
    rng = np.random.default_rng([seed, round_index])
    return np.sort(rng.choice(n_clients, size=m, replace=False))


def _local_seed(seed: int, round_index: int, client: int) -> int:
    return int(np.random.SeedSequence([seed, round_index, client]).generate_state(1)[0])


def local_update(global_model: ModelParams, shard: Dataset, cfg: FLConfig, seed: int) -> np.ndarray:
    opt = SGD(global_model, replace(cfg.local, seed=seed))
    rows = np.arange(len(shard))
    for _ in range(cfg.local_epochs):
        opt.epoch(shard.X, shard.label, rows)
    return opt.theta - global_model.values


@dataclass
class RoundLog:
    round: int
    aggregator: str
    selected: tuple[int, ...]
    wga: float | None = None
    acc: float | None = None
    asr: float | None = None


def aggregate(updates: Sequence[ClientUpdate], agg: Aggregator, state: SparseFedState | None) -> tuple[np.ndarray, SparseFedState | None]:
    if agg.kind == AggregatorKind.FEDAVG:
        return aggregate_fedavg(updates), state
    if agg.kind == AggregatorKind.MEDIAN:
        return aggregate_median(updates), state
    if agg.kind == AggregatorKind.TRIMMED_MEAN:
        return aggregate_trimmed_mean(updates, agg.trim_k), state
    n = len(updates[0].delta)
    emitted, state, _ = aggregate_sparsefed(updates, agg.keep(n), agg.momentum, state)
    return emitted, state


def run_round(
    global_model: ModelParams,
    shards: Sequence[Dataset],
    selected: Sequence[int],
    cfg: FLConfig,
    round_index: int = 0,
    seed: int = 0,
    state: SparseFedState | None = None,
) -> tuple[ModelParams, RoundLog, SparseFedState | None]:
    """Local training on the selected clients, aggregation, server step of 1."""
    if len(selected) == 0:
        raise DomainError("no clients selected")
    updates = [
        ClientUpdate(local_update(global_model, shards[c], cfg, _local_seed(seed, round_index, int(c))), int(c), len(shards[c]))
        for c in selected if len(shards[c])
    ]
    if not updates:
        raise DomainError("every selected client is empty")
    delta, state = aggregate(updates, cfg.aggregator, state)
    new = global_model.replace(global_model.values + delta)
    return new, RoundLog(round_index, cfg.aggregator.name, tuple(int(c) for c in selected)), state


@dataclass
class FLRun:
    model: ModelParams
    rounds: list[RoundLog]
    wga: float
    acc: float
    asr: float | None


def run_federated(
    train_ds: Dataset,
    test: Dataset,
    cfg: FLConfig,
    seed: int,
    trigger=None,
    target_class: int = 1,
    shards: Sequence[Dataset] | None = None,
) -> FLRun:
    if shards is None:
        shards = partition_clients(train_ds, cfg.n_clients, cfg.partition, seed)
    model = ModelParams.init(train_ds.d, cfg.hidden, train_ds.C, seed=seed)
    state = None
    logs = []
    for r in range(cfg.rounds):
        selected = select_clients(cfg.n_clients, cfg.per_round, seed, r)
        model, log, state = run_round(model, shards, selected, cfg, r, seed, state)
        ga, _ = evaluate(model, test)
        log.wga, log.acc = wga(ga), ga.overall
        if trigger is not None:
            log.asr = asr_dlbd(model, test, trigger, target_class)
        logs.append(log)
    ga, _ = evaluate(model, test)
    asr = asr_dlbd(model, test, trigger, target_class) if trigger is not None else None
    return FLRun(model, logs, wga(ga), ga.overall, asr)


@dataclass
class FLComparison:
    baseline: FLRun
    defended: FLRun

    @property
    def wga_drop(self) -> float:
        return self.baseline.wga - self.defended.wga

    @property
    def acc_drop(self) -> float:
        return self.baseline.acc - self.defended.acc

    def metrics(self) -> dict[str, float | None]:
        return {
            "acc": self.defended.acc, "wga": self.defended.wga, "asr": self.defended.asr,
            "acc_fedavg": self.baseline.acc, "wga_fedavg": self.baseline.wga,
            "delta_acc": self.acc_drop, "delta_wga": self.wga_drop,
        }


def run_fl_experiment(
    train_ds: Dataset,
    test: Dataset,
    cfg: FLConfig,
    seed: int,
    trigger=None,
    target_class: int = 1,
    baseline: FLRun | None = None,
) -> FLComparison:
    """Defended run and its FedAvg twin on the same shards, seeds and test set."""
    shards = partition_clients(train_ds, cfg.n_clients, cfg.partition, seed)
    if baseline is None:
        base_cfg = replace(cfg, aggregator=Aggregator(AggregatorKind.FEDAVG))
        baseline = run_federated(train_ds, test, base_cfg, seed, trigger, target_class, shards)
    defended = run_federated(train_ds, test, cfg, seed, trigger, target_class, shards)
    return FLComparison(baseline, defended)


def write_round_log(logs: Sequence[RoundLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "aggregator", "wga", "acc", "asr"])
        for r in logs:
            w.writerow([r.round, r.aggregator, r.wga, r.acc, r.asr])
