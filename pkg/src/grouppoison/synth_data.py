"""Synthetic group-structured datasets.

Every sample belongs to a group ``(y, a)``: a class label and a spurious
attribute.  Features are drawn as ``class_mean[y] + spurious_mean[a] + noise``
so that the attribute is a shortcut for the class whenever the group
proportions are skewed.  Poisons carry their base group ``(y, a)`` and, in
``label``, the (possibly flipped) label they are trained with.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError

CLEAN = "clean"
POISON_KINDS = ("dlbd", "sa", "gm", "label_flip")

# Group proportions of the Waterbirds training set, poisons included (1%).
WATERBIRDS_PROPORTIONS = ((0.720, 0.038), (0.012, 0.220))
WATERBIRDS_POISON_FRACTION = 0.010


class GroupLabel(NamedTuple):
    class_label: int
    attribute: int

    def __str__(self) -> str:
        return f"g{self.class_label}{self.attribute}"


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    group: GroupLabel
    label: int
    provenance: str
    id: int
    base_id: int = -1

    @property
    def is_poison(self) -> bool:
        return self.provenance != CLEAN


@dataclass(frozen=True)
class GroupSpec:
    """Generative description of a dataset.

    ``proportions[y][a]`` is the share of clean group ``(y, a)``; together with
    ``poison_fraction`` the shares must sum to one.
    """

    proportions: tuple[tuple[float, ...], ...]
    class_means: np.ndarray
    spurious_means: np.ndarray
    noise: float = 1.0
    poison_fraction: float = 0.0
    poison_base_group: GroupLabel = GroupLabel(0, 0)
    poison_label: int | None = None

    def __post_init__(self):
        props = np.asarray(self.proportions, dtype=float)
        C, A = props.shape
        cm = np.asarray(self.class_means, dtype=float)
        sm = np.asarray(self.spurious_means, dtype=float)
        if cm.ndim != 2 or cm.shape[0] != C:
            raise ConfigurationError(f"class_means must have {C} rows", "class_means")
        if sm.shape != (A, cm.shape[1]):
            raise ConfigurationError(f"spurious_means must have shape ({A}, {cm.shape[1]})", "spurious_means")
        if np.any(props < 0) or np.any(props > 1):
            raise ConfigurationError("proportions must lie in [0, 1]", "proportions")
        if not 0 <= self.poison_fraction <= 1:
            raise ConfigurationError("poison_fraction must lie in [0, 1]", "poison_fraction")
        total = props.sum() + self.poison_fraction
        if abs(total - 1.0) > 1e-9:
            raise ConfigurationError(f"proportions plus poison fraction sum to {total!r}, expected 1", "proportions")
        if not self.noise > 0:
            raise ConfigurationError("noise scale must be positive", "noise")
        by, ba = self.poison_base_group
        if not (0 <= by < C and 0 <= ba < A):
            raise ConfigurationError("poison_base_group out of range", "poison_base_group")
        if self.poison_label is not None and (self.poison_label == by or not 0 <= self.poison_label < C):
            raise ConfigurationError("poison_label must be a class different from the base class", "poison_label")
        object.__setattr__(self, "class_means", cm)
        object.__setattr__(self, "spurious_means", sm)
        object.__setattr__(self, "poison_base_group", GroupLabel(*self.poison_base_group))

    @property
    def C(self) -> int:
        return len(self.proportions)

    @property
    def A(self) -> int:
        return len(self.proportions[0])

    @property
    def d(self) -> int:
        return self.class_means.shape[1]

    @property
    def flipped_label(self) -> int:
        if self.poison_label is not None:
            return self.poison_label
        return (self.poison_base_group.class_label + 1) % self.C

    def group_mean(self, g: GroupLabel) -> np.ndarray:
        return self.class_means[g[0]] + self.spurious_means[g[1]]


def default_spec(
    poison_fraction: float = 0.0,
    d: int = 20,
    class_scale: float = 1.5,
    spurious_scale: float = 3.0,
    noise: float = 1.0,
    proportions: Sequence[Sequence[float]] = WATERBIRDS_PROPORTIONS,
) -> GroupSpec:
    """Binary task with one binary attribute and Waterbirds-like skew.

    Class means are ``-/+ class_scale * e_0`` and spurious means
    ``-/+ spurious_scale * e_1``.  The clean proportions are rescaled so that
    they sum to ``1 - poison_fraction``.
    """
    props = np.asarray(proportions, dtype=float)
    props = props * (1.0 - poison_fraction) / props.sum()
    class_means = np.zeros((2, d))
    class_means[0, 0], class_means[1, 0] = -class_scale, class_scale
    spurious_means = np.zeros((2, d))
    spurious_means[0, 1], spurious_means[1, 1] = -spurious_scale, spurious_scale
    return GroupSpec(
        proportions=tuple(tuple(float(v) for v in row) for row in props),
        class_means=class_means,
        spurious_means=spurious_means,
        noise=noise,
        poison_fraction=poison_fraction,
    )


def waterbirds_spec(**kwargs) -> GroupSpec:
    """Waterbirds-like proportions with a 1% label-flip poison slot."""
    return default_spec(poison_fraction=WATERBIRDS_POISON_FRACTION, **kwargs)


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented sample collection.

    ``y``/``a`` hold the ground-truth (base) group; ``label`` is what the
    learner is trained on.  For clean samples ``label == y``.
    """

    X: np.ndarray
    y: np.ndarray
    a: np.ndarray
    label: np.ndarray
    provenance: np.ndarray
    ids: np.ndarray
    base_id: np.ndarray
    d: int
    C: int = 2
    A: int = 2

    def __post_init__(self):
        n = len(self.ids)
        X = np.asarray(self.X, dtype=float).reshape(n, self.d)
        object.__setattr__(self, "X", _readonly(X))
        for name, dtype in (("y", np.int64), ("a", np.int64), ("label", np.int64), ("ids", np.int64), ("base_id", np.int64)):
            arr = np.asarray(getattr(self, name), dtype=dtype).reshape(n)
            object.__setattr__(self, name, _readonly(arr))
        object.__setattr__(self, "provenance", _readonly(np.asarray(self.provenance, dtype="<U10").reshape(n)))
        if len(np.unique(self.ids)) != n:
            raise DomainError("sample ids must be unique within a dataset")
        if n and (self.y.max() >= self.C or self.a.max() >= self.A or self.label.max() >= self.C):
            raise DomainError("group or label index out of range")
        if np.any(self.is_poison & (self.label == self.y) & (self.provenance != "gm")):
            raise DomainError("dirty-label poisons must carry a label different from their base class")

    # -- construction helpers -------------------------------------------------
    @classmethod
    def empty(cls, d: int, C: int = 2, A: int = 2) -> "Dataset":
        z = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, d)), z, z, z, np.zeros(0, dtype="<U10"), z, z, d, C, A)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def is_poison(self) -> np.ndarray:
        return self.provenance != CLEAN

    @property
    def group_index(self) -> np.ndarray:
        """Flat group index ``y * A + a`` of every sample's base group."""
        return self.y * self.A + self.a

    @property
    def groups(self) -> list[GroupLabel]:
        return [GroupLabel(y, a) for y in range(self.C) for a in range(self.A)]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            self.X[index], self.y[index], self.a[index], self.label[index],
            self.provenance[index], self.ids[index], self.base_id[index],
            self.d, self.C, self.A,
        )

    def clean(self) -> "Dataset":
        return self.subset(~self.is_poison)

    def poisons(self) -> "Dataset":
        return self.subset(self.is_poison)

    def by_ids(self, ids) -> "Dataset":
        pos = self.positions(ids)
        return self.subset(pos)

    def positions(self, ids) -> np.ndarray:
        """Row positions of ``ids`` (which must all be present)."""
        ids = np.asarray(ids if isinstance(ids, np.ndarray) else sorted(ids) if isinstance(ids, (set, frozenset)) else list(ids), dtype=np.int64)
        if not len(ids):
            return np.zeros(0, dtype=np.int64)
        order = np.argsort(self.ids, kind="stable")
        sorted_ids = self.ids[order]
        pos = np.searchsorted(sorted_ids, ids)
        if len(sorted_ids) == 0 or np.any(pos >= len(sorted_ids)) or np.any(sorted_ids[np.minimum(pos, len(sorted_ids) - 1)] != ids):
            raise DomainError("unknown sample id")
        return order[pos]

    def members(self, group: GroupLabel, include_poisons: bool = False) -> np.ndarray:
        """Ids of the clean samples of ``group``."""
        mask = (self.y == group[0]) & (self.a == group[1])
        if not include_poisons:
            mask &= ~self.is_poison
        return self.ids[mask]

    def append(self, other: "Dataset") -> "Dataset":
        if (other.d, other.C, other.A) != (self.d, self.C, self.A):
            raise DomainError("cannot concatenate datasets with different metadata")
        return Dataset(
            np.concatenate([self.X, other.X]), np.concatenate([self.y, other.y]),
            np.concatenate([self.a, other.a]), np.concatenate([self.label, other.label]),
            np.concatenate([self.provenance, other.provenance]), np.concatenate([self.ids, other.ids]),
            np.concatenate([self.base_id, other.base_id]), self.d, self.C, self.A,
        )

    def with_features(self, X: np.ndarray) -> "Dataset":
        return Dataset(X, self.y, self.a, self.label, self.provenance, self.ids, self.base_id, self.d, self.C, self.A)

    def next_id(self) -> int:
        return int(self.ids.max()) + 1 if len(self) else 0

    def samples(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield Sample(
                features=self.X[i], group=GroupLabel(int(self.y[i]), int(self.a[i])),
                label=int(self.label[i]), provenance=str(self.provenance[i]),
                id=int(self.ids[i]), base_id=int(self.base_id[i]),
            )

    def identical(self, other: "Dataset") -> bool:
        return (
            (self.d, self.C, self.A) == (other.d, other.C, other.A)
            and all(np.array_equal(getattr(self, f), getattr(other, f)) for f in ("X", "y", "a", "label", "provenance", "ids", "base_id"))
        )

    # -- JSON interchange -----------------------------------------------------
    def to_json(self) -> dict:
        return {
            "d": self.d,
            "C": self.C,
            "A": self.A,
            "samples": [
                {
                    "id": int(self.ids[i]),
                    "x": [float(v) for v in self.X[i]],
                    "y": int(self.y[i]),
                    "a": int(self.a[i]),
                    "label": int(self.label[i]),
                    "provenance": str(self.provenance[i]),
                }
                for i in range(len(self))
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Dataset":
        d, C, A = int(doc["d"]), int(doc["C"]), int(doc["A"])
        rows = doc["samples"]
        if not rows:
            return cls.empty(d, C, A)
        return cls(
            X=np.array([r["x"] for r in rows], dtype=float),
            y=[r["y"] for r in rows], a=[r["a"] for r in rows], label=[r["label"] for r in rows],
            provenance=[r["provenance"] for r in rows], ids=[r["id"] for r in rows],
            base_id=[-1] * len(rows), d=d, C=C, A=A,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        return cls.from_json(json.loads(Path(path).read_text()))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def group_sizes(spec: GroupSpec, n: int) -> tuple[np.ndarray, int]:
    """Clean group sizes (shape ``(C, A)``) and poison count for ``n`` samples."""
    props = np.asarray(spec.proportions, dtype=float)
    sizes = np.array([[_round_half_up(p * n) for p in row] for row in props], dtype=np.int64)
    n_poison = _round_half_up(spec.poison_fraction * n)
    remainder = n - int(sizes.sum()) - n_poison
    # rounding slack goes to the largest group
    big = np.unravel_index(np.argmax(props), props.shape)
    sizes[big] += remainder
    if sizes[big] < 0:
        raise ConfigurationError("rounding produced a negative group size", "proportions")
    return sizes, n_poison


def generate_dataset(spec: GroupSpec, n: int, seed: int) -> Dataset:
    """Draw ``n`` samples (clean groups in row-major order, then poisons).

    Poison slots are filled with label-flipped draws from the base group's
    distribution, i.e. the dirty-label triple ``(x, flipped, a)``.
    """
    if n < 0:
        raise DomainError("n must be non-negative")
    sizes, n_poison = group_sizes(spec, n)
    rng = np.random.default_rng(seed)
    X, y, a, label, prov = [], [], [], [], []
    for gy in range(spec.C):
        for ga in range(spec.A):
            k = int(sizes[gy, ga])
            mean = spec.group_mean(GroupLabel(gy, ga))
            X.append(mean + spec.noise * rng.standard_normal((k, spec.d)))
            y += [gy] * k
            a += [ga] * k
            label += [gy] * k
            prov += [CLEAN] * k
    if n_poison:
        base = spec.poison_base_group
        X.append(spec.group_mean(base) + spec.noise * rng.standard_normal((n_poison, spec.d)))
        y += [base.class_label] * n_poison
        a += [base.attribute] * n_poison
        label += [spec.flipped_label] * n_poison
        prov += ["label_flip"] * n_poison
    if n == 0:
        return Dataset.empty(spec.d, spec.C, spec.A)
    return Dataset(
        X=np.concatenate(X), y=y, a=a, label=label, provenance=prov,
        ids=np.arange(n), base_id=np.full(n, -1), d=spec.d, C=spec.C, A=spec.A,
    )


def group_counts(ds: Dataset) -> tuple[dict[GroupLabel, int], int]:
    """Clean counts for every group (zeros included) and the poison count."""
    clean = ~ds.is_poison
    flat = np.bincount(ds.group_index[clean], minlength=ds.C * ds.A)
    counts = {g: int(flat[g[0] * ds.A + g[1]]) for g in ds.groups}
    return counts, int(ds.is_poison.sum())


def minority_groups(ds: Dataset, factor: float = 0.5) -> set[GroupLabel]:
    """Groups whose clean count is below ``factor`` times the per-group average."""
    if not 0 < factor < 1:
        raise DomainError("factor must lie in (0, 1)")
    counts, _ = group_counts(ds)
    total = sum(counts.values())
    if total == 0:
        raise DomainError("minority groups are undefined for a dataset without clean samples")
    threshold = factor * total / len(counts)
    return {g for g, c in counts.items() if c < threshold}


def lowest_group(ds: Dataset) -> GroupLabel:
    """The least represented clean group (LRG-1); ties go to the first group."""
    counts, _ = group_counts(ds)
    present = {g: c for g, c in counts.items()}
    return min(present, key=lambda g: (present[g], g))


def split(ds: Dataset, fractions: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified train/val/test split; every poison goes to train."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ConfigurationError("split fractions must be three non-negative numbers summing to 1", "split")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    gi = ds.group_index
    clean = ~ds.is_poison
    for g in range(ds.C * ds.A):
        pos = np.flatnonzero(clean & (gi == g))
        pos = pos[rng.permutation(len(pos))]
        n_tr = _round_half_up(fractions[0] * len(pos))
        n_va = min(_round_half_up(fractions[1] * len(pos)), len(pos) - n_tr)
        parts[0].append(pos[:n_tr])
        parts[1].append(pos[n_tr:n_tr + n_va])
        parts[2].append(pos[n_tr + n_va:])
    parts[0].append(np.flatnonzero(ds.is_poison))
    out = []
    for chunk in parts:
        pos = np.sort(np.concatenate(chunk)) if chunk else np.zeros(0, dtype=np.int64)
        out.append(ds.subset(pos.astype(np.int64)))
    return out[0], out[1], out[2]


@dataclass(frozen=True)
class NonIID:
    minority_holder_fraction: float = 0.10


IID = "iid"


def partition_clients(ds: Dataset, n_clients: int, mode: str | NonIID = IID, seed: int = 0, factor: float = 0.5) -> list[Dataset]:
    """Disjoint client shards whose union is ``ds``.

    ``IID`` deals a random permutation into near-equal shards.  ``NonIID``
    places every minority-group sample (and every poison) on only
    ``ceil(fraction * n_clients)`` randomly chosen clients; majority samples
    top the shards up to near-equal sizes.
    """
    if n_clients < 1:
        raise ConfigurationError("n_clients must be at least 1", "n_clients")
    if n_clients > len(ds):
        raise ConfigurationError("more clients than samples", "n_clients")
    rng = np.random.default_rng(seed)
    n = len(ds)
    targets = np.array([len(c) for c in np.array_split(np.arange(n), n_clients)])
    if mode == IID or mode == "IID":
        perm = rng.permutation(n)
        bounds = np.cumsum(targets)[:-1]
        return [ds.subset(np.sort(p)) for p in np.split(perm, bounds)]
    if not isinstance(mode, NonIID):
        raise ConfigurationError(f"unknown partition mode {mode!r}", "partition")
    n_holders = max(1, math.ceil(mode.minority_holder_fraction * n_clients - 1e-12))
    holders = np.sort(rng.choice(n_clients, size=n_holders, replace=False))
    minority = minority_groups(ds, factor) if len(ds.clean()) else set()
    mask = ds.is_poison.copy()
    for g in minority:
        mask |= (ds.y == g[0]) & (ds.a == g[1]) & ~ds.is_poison
    special = np.flatnonzero(mask)
    special = special[rng.permutation(len(special))]
    shards: list[list[int]] = [[] for _ in range(n_clients)]
    for k, chunk in enumerate(np.array_split(special, n_holders)):
        shards[holders[k]].extend(chunk.tolist())
    rest = np.flatnonzero(~mask)
    rest = rest[rng.permutation(len(rest))]
    need = np.maximum(targets - np.array([len(s) for s in shards]), 0)
    # scale the top-up so it consumes exactly the remaining samples
    alloc = np.floor(need * (len(rest) / max(need.sum(), 1))).astype(int)
    short = len(rest) - alloc.sum()
    order = np.argsort(-(need * (len(rest) / max(need.sum(), 1)) - alloc), kind="stable")
    alloc[order[:short]] += 1
    start = 0
    for c in range(n_clients):
        shards[c].extend(rest[start:start + alloc[c]].tolist())
        start += alloc[c]
    return [ds.subset(np.sort(np.asarray(s, dtype=np.int64))) for s in shards]
