"""Group-robust training: JTT upsampling, GEORGE clustering and online group DRO."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from sklearn.cluster import KMeans
from sklearn.metrics import silhouette_score

from .errors import ConfigurationError, DomainError
from .model import SGD, ModelParams, TrainConfig, TrainLog, evaluate, forward_batch, losses, train
from .synth_data import Dataset


class Intervention(str, Enum):
    STANDARD = "standard"
    IDEAL = "ideal"
    WORST = "worst"


@dataclass(frozen=True)
class JTTConfig:
    identification_epochs: int = 10
    upsample: int = 100
    identification: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.01, weight_decay=0.3))
    final: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.01, weight_decay=0.03, epochs=30))
    hidden: int = 32
    strategy: str = "replicate"

    def __post_init__(self):
        if self.strategy not in ("replicate", "reweight"):
            raise ConfigurationError("strategy must be 'replicate' or 'reweight'", "jtt.strategy")
        if self.upsample < 1:
            raise ConfigurationError("upsampling factor must be at least 1", "jtt.upsample")
        if self.identification_epochs < 0:
            raise ConfigurationError("identification epochs must be non-negative", "jtt.identification_epochs")


@dataclass(frozen=True)
class AmplificationSet:
    ids: frozenset[int]
    multiplicity: int = 1

    def weights(self) -> dict[int, int]:
        return {i: self.multiplicity for i in sorted(self.ids)}

    def to_json(self) -> dict:
        return {"ids": sorted(self.ids), "multiplicity": self.multiplicity}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))


def jtt_identify(ds: Dataset, cfg: JTTConfig, m0: ModelParams | None = None) -> AmplificationSet:
    """Ids misclassified by the regularized identification model after exactly T epochs."""
    ident = replace(cfg.identification, epochs=cfg.identification_epochs)
    if m0 is None:
        m0 = ModelParams.init(ds.d, cfg.hidden, ds.C, seed=ident.seed)
    m, _ = train(m0, ds, ident)
    _, wrong = evaluate(m, ds)
    return AmplificationSet(frozenset(wrong), cfg.upsample)


def apply_intervention(identified: frozenset[int], poison_ids: frozenset[int], intervention: Intervention) -> frozenset[int]:
    intervention = Intervention(intervention)
    if intervention == Intervention.IDEAL:
        return identified - poison_ids
    if intervention == Intervention.WORST:
        return identified | poison_ids
    return identified


@dataclass
class JTTResult:
    model: ModelParams
    used: AmplificationSet
    identified: AmplificationSet
    log: TrainLog


def jtt_train(
    ds: Dataset,
    cfg: JTTConfig,
    intervention: Intervention = Intervention.STANDARD,
    val: Dataset | None = None,
    exclude: frozenset[int] | set[int] = frozenset(),
    identified: AmplificationSet | None = None,
) -> JTTResult:
    """Identification, intervention on the upsampled set, then final training.

    ``exclude`` removes ids (e.g. suspected poisons) from the upsampled set
    before the intervention is applied.
    """
    if identified is None:
        identified = jtt_identify(ds, cfg)
    poisons = frozenset(ds.ids[ds.is_poison].tolist())
    ids = apply_intervention(identified.ids - frozenset(exclude), poisons, intervention)
    used = AmplificationSet(ids, cfg.upsample)
    m0 = ModelParams.init(ds.d, cfg.hidden, ds.C, seed=cfg.final.seed)
    if cfg.strategy == "replicate":
        model, log = train(m0, ds, cfg.final, sample_weights=used.weights(), val=val)
    else:
        mult = np.ones(len(ds))
        mult[ds.positions(used.ids)] = used.multiplicity
        model, log = train(m0, ds, cfg.final, val=val, weight_fn=lambda rows: mult[rows] / mult[rows].sum())
    return JTTResult(model, used, identified, log)


# -- GEORGE ------------------------------------------------------------------

@dataclass(frozen=True)
class PseudoGroups:
    """Cluster index per id, clustered separately within each training label."""

    ids: np.ndarray
    classes: np.ndarray
    clusters: np.ndarray
    k_per_class: dict[int, int]

    @property
    def group_index(self) -> np.ndarray:
        """Flat pseudo-group index, unique across classes."""
        offsets, acc = {}, 0
        for c in sorted(self.k_per_class):
            offsets[c] = acc
            acc += self.k_per_class[c]
        return np.array([offsets[c] for c in self.classes], dtype=np.int64) + self.clusters

    @property
    def n_groups(self) -> int:
        return sum(self.k_per_class.values())

    def smallest_cluster(self, cls: int) -> int:
        counts = np.bincount(self.clusters[self.classes == cls], minlength=self.k_per_class[cls])
        return int(np.argmin(counts))

    def largest_cluster(self, cls: int) -> int:
        counts = np.bincount(self.clusters[self.classes == cls], minlength=self.k_per_class[cls])
        return int(np.argmax(counts))

    def with_clusters(self, clusters: np.ndarray) -> "PseudoGroups":
        return PseudoGroups(self.ids, self.classes, np.asarray(clusters, dtype=np.int64), self.k_per_class)

    def to_json(self) -> dict:
        return {
            "k_per_class": {str(c): k for c, k in sorted(self.k_per_class.items())},
            "assignments": [{"id": int(i), "class": int(c), "cluster": int(k)} for i, c, k in zip(self.ids, self.classes, self.clusters)],
        }


def farthest_point_init(Z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded first center, then repeatedly the point farthest from all chosen centers."""
    chosen = [int(rng.integers(len(Z)))]
    dist = np.linalg.norm(Z - Z[chosen[0]], axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(dist))  # lowest index on ties
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(Z - Z[nxt], axis=1))
    return Z[chosen]


def kmeans(Z: np.ndarray, k: int, seed: int, iterations: int = 50) -> np.ndarray:
    init = farthest_point_init(Z, k, np.random.default_rng(seed))
    km = KMeans(n_clusters=k, init=init, n_init=1, max_iter=iterations, algorithm="lloyd")
    return km.fit_predict(Z).astype(np.int64)


def cluster_class(Z: np.ndarray, max_clusters: int, seed: int) -> np.ndarray:
    """Best k-means labelling by mean silhouette over k in [2, max_clusters]; k=1 when degenerate."""
    n = len(Z)
    n_distinct = len(np.unique(Z, axis=0)) if n else 0
    best, best_score = np.zeros(n, dtype=np.int64), -np.inf
    for k in range(2, max_clusters + 1):
        if k > n_distinct or k >= n:
            break
        labels = kmeans(Z, k, seed)
        if len(np.unique(labels)) < 2:
            continue
        score = silhouette_score(Z, labels)
        if score > best_score:
            best, best_score = labels, score
    # relabel so cluster indices are contiguous
    _, best = np.unique(best, return_inverse=True)
    return best.astype(np.int64)


def george_cluster(ds: Dataset, erm_model: ModelParams, max_clusters: int = 10, seed: int = 0) -> PseudoGroups:
    if max_clusters < 2:
        raise ConfigurationError("max_clusters must be at least 2", "george.max_clusters")
    _, latent = forward_batch(erm_model, ds.X) if len(ds) else (None, np.zeros((0, erm_model.h)))
    clusters = np.zeros(len(ds), dtype=np.int64)
    k_per_class = {}
    for c in range(ds.C):
        pos = np.flatnonzero(ds.label == c)
        if len(pos) == 0:
            continue
        lab = cluster_class(latent[pos], max_clusters, seed + c) if len(pos) >= 2 else np.zeros(len(pos), dtype=np.int64)
        clusters[pos] = lab
        k_per_class[c] = int(lab.max()) + 1
    return PseudoGroups(ds.ids.copy(), ds.label.copy(), clusters, k_per_class)


@dataclass(frozen=True)
class DROState:
    q: np.ndarray
    eta: float = 0.01

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if np.any(q < 0) or abs(q.sum() - 1) > 1e-9:
            raise DomainError("group weights must form a probability vector")
        if self.eta < 0:
            raise ConfigurationError("DRO step size must be non-negative", "george.eta")
        object.__setattr__(self, "q", q)

    @classmethod
    def uniform(cls, n_groups: int, eta: float = 0.01) -> "DROState":
        return cls(np.full(n_groups, 1.0 / n_groups), eta)


def group_dro_step(state: DROState, group_losses: np.ndarray, group_sizes: np.ndarray | None = None) -> tuple[DROState, np.ndarray]:
    """Exponentiated-gradient update of the group weights.

    Returns the new state and the per-sample weight of each group
    (``q_g / size_g``, zero for empty groups).
    """
    group_losses = np.asarray(group_losses, dtype=float)
    if not np.all(np.isfinite(group_losses)):
        raise DomainError("group losses must be finite")
    step = state.eta * group_losses
    if np.ptp(step[state.q > 0]) == 0:
        # a uniform shift cancels in the normalization; skip it to keep q exact
        q = state.q.copy()
    else:
        logits = np.log(np.maximum(state.q, 1e-300)) + step
        logits[state.q == 0] = -np.inf
        q = np.exp(logits - logits.max())
        q /= q.sum()
    new = DROState(q, state.eta)
    if group_sizes is None:
        return new, q.copy()
    sizes = np.asarray(group_sizes, dtype=float)
    return new, np.divide(q, sizes, out=np.zeros_like(q), where=sizes > 0)


@dataclass(frozen=True)
class GeorgeConfig:
    erm: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.01, weight_decay=1e-4, epochs=10))
    dro: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.01, weight_decay=1e-4, epochs=20))
    max_clusters: int = 10
    eta: float = 0.01
    hidden: int = 32


@dataclass
class GeorgeResult:
    model: ModelParams
    groups: PseudoGroups
    state: DROState
    log: TrainLog
    q_history: list[np.ndarray] = field(default_factory=list)


def intervene_clusters(groups: PseudoGroups, poison_ids: set[int], intervention: Intervention) -> PseudoGroups:
    """Ideal moves poisons out of their class's smallest cluster; Worst moves them in."""
    intervention = Intervention(intervention)
    if intervention == Intervention.STANDARD or not poison_ids:
        return groups
    clusters = groups.clusters.copy()
    is_poison = np.isin(groups.ids, np.fromiter(poison_ids, dtype=np.int64))
    for c in groups.k_per_class:
        small, large = groups.smallest_cluster(c), groups.largest_cluster(c)
        sel = is_poison & (groups.classes == c)
        if intervention == Intervention.WORST:
            clusters[sel] = small
        elif small != large:
            clusters[sel & (clusters == small)] = large
    return groups.with_clusters(clusters)


def dro_train(
    ds: Dataset,
    groups: PseudoGroups,
    cfg: TrainConfig,
    eta: float = 0.01,
    m0: ModelParams | None = None,
    val: Dataset | None = None,
    hidden: int = 32,
) -> GeorgeResult:
    """Online group DRO: each batch reweights groups by their batch loss."""
    if len(ds) == 0:
        raise DomainError("cannot train on an empty dataset")
    if not np.array_equal(groups.ids, ds.ids):
        raise DomainError("pseudo-groups must cover the training ids in dataset order")
    gidx = groups.group_index
    G = groups.n_groups
    m0 = m0 or ModelParams.init(ds.d, hidden, ds.C, seed=cfg.seed)
    opt = SGD(m0, cfg)
    state = DROState.uniform(G, eta)
    history = [state.q]
    log = TrainLog()
    best, best_wga = opt.params, -np.inf

    def weight_fn(batch: np.ndarray) -> np.ndarray:
        nonlocal state
        g = gidx[batch]
        sizes = np.bincount(g, minlength=G).astype(float)
        ell = losses(opt.params, ds.X[batch], ds.label[batch])
        sums = np.bincount(g, weights=ell, minlength=G)
        mean_loss = np.divide(sums, sizes, out=np.zeros(G), where=sizes > 0)
        # groups absent from the batch keep their weight
        state, w = group_dro_step(state, np.where(sizes > 0, mean_loss, 0.0), sizes)
        history.append(state.q)
        return w[g]

    for epoch in range(1, cfg.epochs + 1):
        opt.epoch(ds.X, ds.label, np.arange(len(ds)), weight_fn)
        log.epochs_run = epoch
        if val is not None:
            ga, _ = evaluate(opt.params, val)
            w = min(ga.clean_groups().values())
            log.val_wga.append(w)
            log.val_acc.append(ga.overall)
            if w > best_wga:
                best, best_wga, log.selected_epoch = opt.params, w, epoch
    if val is None:
        best, log.selected_epoch = opt.params, cfg.epochs
    return GeorgeResult(best, groups, state, log, history)


def george_train(
    ds: Dataset,
    cfg: GeorgeConfig,
    intervention: Intervention = Intervention.STANDARD,
    val: Dataset | None = None,
    seed: int = 0,
) -> GeorgeResult:
    erm, _ = train(ModelParams.init(ds.d, cfg.hidden, ds.C, seed=cfg.erm.seed), ds, cfg.erm)
    groups = george_cluster(ds, erm, cfg.max_clusters, seed)
    groups = intervene_clusters(groups, set(ds.ids[ds.is_poison].tolist()), intervention)
    return dro_train(ds, groups, cfg.dro, cfg.eta, val=val, hidden=cfg.hidden)
