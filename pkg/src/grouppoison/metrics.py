"""Accuracy, worst-group accuracy, attack success rates and set-based group factors."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .attacks import apply_trigger
from .errors import DomainError
from .model import POISON_GROUP, GroupAccuracies, ModelParams, predict
from .synth_data import Dataset, GroupLabel


def wga(ga: GroupAccuracies | Mapping) -> float:
    """Lowest accuracy over the clean groups present."""
    per_group = ga.clean_groups() if isinstance(ga, GroupAccuracies) else {k: v for k, v in ga.items() if k != POISON_GROUP}
    if not per_group:
        raise DomainError("worst-group accuracy needs at least one group")
    return float(min(per_group.values()))


def asr_dlbd(model: ModelParams, test: Dataset, trigger, target_class: int, exclude_target: bool = True) -> float | None:
    """Share of clean-correct test samples whose prediction changes class under the trigger.

    Samples whose true class already is ``target_class`` cannot be flipped
    towards it and are skipped unless ``exclude_target`` is false.
    """
    keep = ~test.is_poison
    if exclude_target:
        keep &= test.y != target_class
    X, y = test.X[keep], test.y[keep]
    if len(X) == 0:
        return None
    correct = predict(model, X) == y
    if not correct.any():
        return None
    flipped = predict(model, apply_trigger(X[correct], trigger)) != y[correct]
    return float(flipped.mean())


def asr_gm(model: ModelParams, targets: Dataset) -> float:
    if len(targets) == 0:
        raise DomainError("no targets")
    return float(np.mean(predict(model, targets.X) != targets.y))


def asr_sa(acc_clean_model: float, acc_poisoned_model: float) -> float | None:
    """Relative accuracy drop on the attacked group; negative when accuracy improves."""
    if acc_clean_model == 0:
        return None
    return float((acc_clean_model - acc_poisoned_model) / acc_clean_model)


def _fraction_in(selected: Iterable[int], members: Iterable[int]) -> float | None:
    members = set(int(i) for i in members)
    if not members:
        return None
    return len(members & set(int(i) for i in selected)) / len(members)


def idnf(amplified: Iterable[int], members: Iterable[int]) -> float | None:
    """Fraction of ``members`` that ended up in the amplified set."""
    return _fraction_in(amplified, members)


def elmf(eliminated: Iterable[int], members: Iterable[int]) -> float | None:
    """Fraction of ``members`` removed from training."""
    return _fraction_in(eliminated, members)


def group_factors(selected: Iterable[int], ds: Dataset, prefix: str) -> dict[str, float | None]:
    """``{prefix}_g{y}{a}`` for every clean group plus ``{prefix}_poison``."""
    selected = set(int(i) for i in selected)
    out = {f"{prefix}_{g}": _fraction_in(selected, ds.members(g)) for g in ds.groups}
    out[f"{prefix}_poison"] = _fraction_in(selected, ds.ids[ds.is_poison])
    return out


@dataclass(frozen=True)
class Stat:
    mean: float | None
    std: float | None
    n_runs: int


@dataclass(frozen=True)
class MetricsReport:
    """Mean, sample standard deviation and run count per metric name."""

    stats: dict[str, Stat]

    def __getitem__(self, key: str) -> Stat:
        return self.stats[key]

    def keys(self):
        return self.stats.keys()

    def to_flat(self) -> dict:
        out: dict = {}
        for name, s in self.stats.items():
            out[f"{name}_mean"] = s.mean
            out[f"{name}_std"] = s.std
        out["n_runs"] = max((s.n_runs for s in self.stats.values()), default=0)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_flat(), sort_keys=False)

    @classmethod
    def single(cls, values: Mapping[str, float | None]) -> "MetricsReport":
        return aggregate_runs([values])


def aggregate_runs(runs: list[Mapping[str, float | None]]) -> MetricsReport:
    """Per-key mean and (n-1)-denominator std; absent (None) values are skipped."""
    if not runs:
        raise DomainError("need at least one run")
    keys = list(runs[0].keys())
    for r in runs[1:]:
        if set(r.keys()) != set(keys):
            raise DomainError("runs do not share the same metric names")
    stats = {}
    for k in keys:
        vals = [float(r[k]) for r in runs if r[k] is not None and not (isinstance(r[k], float) and math.isnan(r[k]))]
        if not vals:
            stats[k] = Stat(None, None, 0)
            continue
        arr = np.asarray(vals)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        stats[k] = Stat(float(arr.mean()), std, len(arr))
    return MetricsReport(stats)


def accuracy_fields(ga: GroupAccuracies) -> dict[str, float | None]:
    out = {"acc": ga.overall, "wga": wga(ga) if ga.clean_groups() else None}
    for g, v in ga.clean_groups().items():
        out[f"acc_{GroupLabel(*g)}"] = v
    return out
