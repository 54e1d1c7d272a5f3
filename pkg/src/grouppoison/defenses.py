"""Training-time elimination of gradient-space outliers and run-time entropy detection."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .attacks import apply_trigger
from .errors import ConfigurationError, DefenseError, DomainError
from .group_robust import Intervention
from .model import SGD, ModelParams, TrainConfig, TrainLog, evaluate, forward_batch, last_layer_gradients
from .synth_data import Dataset, minority_groups


@dataclass(frozen=True)
class EpicConfig:
    warmup: int = 2
    check_period: int = 1
    medoid_fraction: float = 0.1
    patience: int = 2
    stop_epoch: int | None = None
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.01, weight_decay=1e-4, epochs=20))
    hidden: int = 32

    def __post_init__(self):
        if not 0 < self.medoid_fraction < 1:
            raise ConfigurationError("medoid fraction must lie in (0, 1)", "epic.medoid_fraction")
        if self.patience < 1:
            raise ConfigurationError("patience must be at least 1", "epic.patience")
        if self.check_period < 1:
            raise ConfigurationError("check period must be at least 1", "epic.check_period")
        if self.warmup < 0:
            raise ConfigurationError("warmup must be non-negative", "epic.warmup")
        if self.stop_epoch is not None and self.stop_epoch < 0:
            raise ConfigurationError("stop epoch must be non-negative", "epic.stop_epoch")

    def is_check(self, epoch: int) -> bool:
        if epoch <= self.warmup or (epoch - self.warmup) % self.check_period:
            return False
        return self.stop_epoch is None or epoch <= self.stop_epoch


def greedy_k_center(F: np.ndarray, k: int, start: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Farthest-point medoids; returns (medoid rows, nearest medoid per row, distance to it).

    Stops early once every point coincides with a medoid.
    """
    dist = np.linalg.norm(F - F[start], axis=1)
    medoids = [start]
    assign = np.zeros(len(F), dtype=np.int64)
    for j in range(1, k):
        nxt = int(np.argmax(dist))
        if dist[nxt] <= 0:
            break
        medoids.append(nxt)
        dn = np.linalg.norm(F - F[nxt], axis=1)
        closer = dn < dist
        assign[closer] = j
        dist = np.minimum(dist, dn)
    return np.asarray(medoids), assign, dist


def epic_isolation_scores(model: ModelParams, ds: Dataset, medoid_fraction: float = 0.1, seed: int = 0) -> np.ndarray:
    """Boolean flag per row: the sample is a medoid that covers nobody but itself.

    Per training label, greedy k-center picks ``ceil(fraction * n)`` medoids
    in last-layer gradient space starting from a seeded point.  A medoid
    whose Voronoi cell is a singleton lies farther from every other sample
    than the covering radius that the remaining medoids achieve.
    """
    if len(ds) == 0:
        raise DomainError("isolation needs a non-empty active set")
    F = last_layer_gradients(model, ds.X, ds.label)
    rng = np.random.default_rng(seed)
    flags = np.zeros(len(ds), dtype=bool)
    for c in range(ds.C):
        pos = np.flatnonzero(ds.label == c)
        n = len(pos)
        k = math.ceil(round(medoid_fraction * n, 9))
        if n == 0 or k >= n:
            continue
        medoids, assign, _ = greedy_k_center(F[pos], k, int(rng.integers(n)))
        sizes = np.bincount(assign, minlength=len(medoids))
        flags[pos[medoids[sizes == 1]]] = True
    return flags


@dataclass
class CheckRecord:
    epoch: int
    flagged: frozenset[int]
    eliminated: frozenset[int]


@dataclass
class EliminationLog:
    checks: list[CheckRecord] = field(default_factory=list)
    groups: dict[int, str] = field(default_factory=dict)
    provenance: dict[int, str] = field(default_factory=dict)

    def eliminated(self, upto: int | None = None) -> set[int]:
        out: set[int] = set()
        for r in self.checks:
            if upto is None or r.epoch <= upto:
                out |= r.eliminated
        return out

    def flagged(self, upto: int | None = None) -> set[int]:
        """Every id flagged at any check up to ``upto`` (eliminated or not)."""
        out: set[int] = set()
        for r in self.checks:
            if upto is None or r.epoch <= upto:
                out |= r.flagged
        return out

    def rows(self) -> list[tuple[int, int, str, str]]:
        return [
            (r.epoch, i, self.groups[i], self.provenance[i])
            for r in self.checks for i in sorted(r.eliminated)
        ]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["check_epoch", "id", "group", "provenance"])
            w.writerows(self.rows())


@dataclass
class EpicResult:
    model: ModelParams
    log: EliminationLog
    active_ids: set[int]
    train_log: TrainLog


def _minority_mask(ds: Dataset) -> np.ndarray:
    mask = np.zeros(len(ds), dtype=bool)
    for g in minority_groups(ds.clean()):
        mask |= (ds.y == g[0]) & (ds.a == g[1]) & ~ds.is_poison
    return mask


def epic_train(
    ds: Dataset,
    cfg: EpicConfig,
    intervention: Intervention = Intervention.STANDARD,
    val: Dataset | None = None,
    seed: int = 0,
    epochs: int | None = None,
    on_batch: Callable[[np.ndarray], None] | None = None,
) -> EpicResult:
    """SGD that drops samples isolated for ``patience`` consecutive checks.

    ``seed`` drives the medoid starts; training randomness comes from
    ``cfg.train.seed``.  ``epochs`` overrides the configured epoch count.
    ``on_batch`` receives the ids of every mini-batch.
    """
    if len(ds) == 0:
        raise DomainError("cannot train on an empty dataset")
    intervention = Intervention(intervention)
    n_epochs = cfg.train.epochs if epochs is None else epochs
    log = EliminationLog(
        groups={int(i): ("poison" if p else f"g{y}{a}") for i, y, a, p in zip(ds.ids, ds.y, ds.a, ds.is_poison)},
        provenance={int(i): str(p) for i, p in zip(ds.ids, ds.provenance)},
    )
    m0 = ModelParams.init(ds.d, cfg.hidden, ds.C, seed=cfg.train.seed)
    opt = SGD(m0, cfg.train)
    rng = np.random.default_rng(seed)
    active = np.ones(len(ds), dtype=bool)
    streak = np.zeros(len(ds), dtype=np.int64)
    lrg = _minority_mask(ds) if intervention == Intervention.WORST else None
    first_check = True
    tlog = TrainLog()
    best, best_wga = None, -np.inf
    audit = None if on_batch is None else (lambda rows: on_batch(ds.ids[rows]))
    for epoch in range(1, n_epochs + 1):
        opt.epoch(ds.X, ds.label, np.flatnonzero(active), on_batch=audit)
        tlog.epochs_run = epoch
        if cfg.is_check(epoch):
            act = np.flatnonzero(active)
            sub = ds.subset(act)
            flags = np.zeros(len(ds), dtype=bool)
            flags[act[epic_isolation_scores(opt.params, sub, cfg.medoid_fraction, int(rng.integers(2**31)))]] = True
            streak = np.where(flags, streak + 1, 0)
            elim = active & (streak >= cfg.patience)
            if intervention == Intervention.IDEAL:
                elim &= ds.is_poison
            elif intervention == Intervention.WORST and first_check:
                elim |= active & lrg
            first_check = False
            remaining = active & ~elim
            for c in range(ds.C):
                if np.any(ds.label == c) and not np.any(remaining & (ds.label == c)):
                    raise DefenseError(f"elimination would remove every sample of class {c}")
            active = remaining
            log.checks.append(CheckRecord(epoch, frozenset(ds.ids[flags].tolist()), frozenset(ds.ids[elim].tolist())))
        if val is not None:
            ga, _ = evaluate(opt.params, val)
            w = min(ga.clean_groups().values())
            tlog.val_wga.append(w)
            tlog.val_acc.append(ga.overall)
            if w > best_wga:
                best, best_wga, tlog.selected_epoch = opt.params, w, epoch
    if val is None or best is None:
        best, tlog.selected_epoch = opt.params, n_epochs
    return EpicResult(best, log, set(ds.ids[active].tolist()), tlog)


# -- STRIP -------------------------------------------------------------------

@dataclass(frozen=True)
class StripConfig:
    overlays: int = 8
    blend: float = 0.5
    thresholds: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.overlays < 1:
            raise ConfigurationError("at least one overlay is required", "strip.overlays")
        if not 0 < self.blend < 1:
            raise ConfigurationError("blend weight must lie in (0, 1)", "strip.blend")
        if self.thresholds is not None:
            t = tuple(float(v) for v in self.thresholds)
            if any(v < 0 for v in t) or list(t) != sorted(t):
                raise ConfigurationError("thresholds must be non-negative and ascending", "strip.thresholds")
            object.__setattr__(self, "thresholds", t)


def entropy(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def strip_entropies(model: ModelParams, X: np.ndarray, clean_pool: np.ndarray, cfg: StripConfig, seed: int) -> np.ndarray:
    """Mean prediction entropy of each row blended with ``R`` random clean inputs."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    pool = np.asarray(clean_pool, dtype=float)
    if len(pool) < cfg.overlays:
        raise DomainError("clean pool smaller than the number of overlays")
    rng = np.random.default_rng(seed)
    picks = np.stack([rng.choice(len(pool), size=cfg.overlays, replace=False) for _ in range(len(X))]) if len(X) else np.zeros((0, cfg.overlays), dtype=int)
    blended = (1 - cfg.blend) * X[:, None, :] + cfg.blend * pool[picks]
    probs, _ = forward_batch(model, blended.reshape(-1, X.shape[1]))
    return entropy(probs).reshape(len(X), cfg.overlays).mean(axis=1)


def strip_entropy(model: ModelParams, x: np.ndarray, clean_pool: np.ndarray, cfg: StripConfig, seed: int) -> float:
    return float(strip_entropies(model, np.asarray(x)[None], clean_pool, cfg, seed)[0])


def default_thresholds(entropies: np.ndarray, n: int = 21) -> tuple[float, ...]:
    """``n`` evenly spaced thresholds from 0 to just above the largest entropy."""
    top = float(np.nextafter(np.max(entropies), np.inf)) if len(entropies) else 0.0
    return tuple(float(v) for v in np.linspace(0.0, top, n))


@dataclass(frozen=True)
class StripCurves:
    thresholds: tuple[float, ...]
    rates: dict[str, np.ndarray]
    entropies: dict[str, np.ndarray]

    def rows(self) -> list[tuple[float, str, float]]:
        return [(t, name, float(r[i])) for name, r in self.rates.items() for i, t in enumerate(self.thresholds)]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "group", "detection_rate"])
            w.writerows(self.rows())


def detection_rates(entropies: np.ndarray, thresholds: Sequence[float]) -> np.ndarray:
    """Share of entropies strictly below each threshold."""
    e = np.sort(np.asarray(entropies, dtype=float))
    if len(e) == 0:
        return np.zeros(len(thresholds))
    return np.searchsorted(e, np.asarray(thresholds, dtype=float), side="left") / len(e)


def strip_sweep(
    model: ModelParams,
    groups: Mapping[str, np.ndarray],
    clean_pool: np.ndarray,
    cfg: StripConfig,
    seed: int = 0,
) -> StripCurves:
    """Per-group detection rate (entropy below threshold) across the threshold grid."""
    ent = {name: strip_entropies(model, X, clean_pool, cfg, seed + i) for i, (name, X) in enumerate(groups.items())}
    thresholds = cfg.thresholds
    if thresholds is None:
        allv = np.concatenate([v for v in ent.values()]) if ent else np.zeros(0)
        thresholds = default_thresholds(allv)
    return StripCurves(tuple(thresholds), {k: detection_rates(v, thresholds) for k, v in ent.items()}, ent)


def strip_groups(test: Dataset, trigger, target_class: int) -> dict[str, np.ndarray]:
    """Clean test inputs per group plus triggered copies of the non-target ones."""
    out = {str(g): test.X[(test.y == g[0]) & (test.a == g[1]) & ~test.is_poison] for g in test.groups}
    out["triggered"] = apply_trigger(test.X[(test.y != target_class) & ~test.is_poison], trigger)
    return out
