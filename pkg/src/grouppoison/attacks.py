"""Poison crafting: dirty-label backdoor, subpopulation duplication, gradient matching."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, CraftingError, DomainError
from .model import ModelParams, TrainConfig, gradient, input_vjp, per_sample_gradients, train
from .synth_data import Dataset, GroupLabel


class AttackKind(str, Enum):
    DLBD = "dlbd"
    SA = "sa"
    GM = "gm"


@dataclass(frozen=True)
class TriggerPattern:
    """Fixed values written into a few feature coordinates."""

    indices: tuple[int, ...] = (18, 19)
    values: tuple[float, ...] = (4.0, 4.0)

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.indices) != len(self.values):
            raise ConfigurationError("trigger indices and values differ in length", "trigger")
        if len(set(self.indices)) != len(self.indices) or any(i < 0 for i in self.indices):
            raise ConfigurationError("trigger indices must be distinct and non-negative", "trigger.indices")

    @classmethod
    def uniform(cls, value: float, indices=(18, 19)) -> "TriggerPattern":
        return cls(tuple(indices), tuple(value for _ in indices))

    def check_dim(self, d: int) -> None:
        if any(i >= d for i in self.indices):
            raise ConfigurationError(f"trigger index out of range for d={d}", "trigger.indices")


@dataclass(frozen=True)
class GMConfig:
    epsilon: float = 0.5
    restarts: int = 8
    steps: int = 50
    step_size: float = 0.05
    n_targets: int = 5

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ConfigurationError("epsilon must be non-negative", "gm.epsilon")
        if self.restarts < 1:
            raise ConfigurationError("at least one restart is required", "gm.restarts")
        if self.steps < 0:
            raise ConfigurationError("steps must be non-negative", "gm.steps")
        if not self.step_size > 0:
            raise ConfigurationError("step size must be positive", "gm.step_size")
        if self.n_targets < 1:
            raise ConfigurationError("at least one target is required", "gm.n_targets")


@dataclass(frozen=True)
class AttackSpec:
    kind: AttackKind = AttackKind.DLBD
    poison_fraction: float = 0.01
    base_group: GroupLabel = GroupLabel(0, 0)
    target_class: int | None = None
    trigger: TriggerPattern = field(default_factory=TriggerPattern)
    gm: GMConfig = field(default_factory=GMConfig)

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        object.__setattr__(self, "base_group", GroupLabel(*self.base_group))
        if not 0 <= self.poison_fraction < 1:
            raise ConfigurationError("poison fraction must lie in [0, 1)", "attack.poison_fraction")
        if self.target_class is not None and self.target_class == self.base_group.class_label and self.kind != AttackKind.GM:
            raise ConfigurationError("a dirty-label target must differ from the base class", "attack.target_class")

    def resolved_target(self, C: int = 2) -> int:
        """Label given to dirty-label poisons (the next class when unset)."""
        if self.target_class is not None:
            return self.target_class
        return (self.base_group.class_label + 1) % C


def poison_count(fraction: float, n: int) -> int:
    # guard against 0.07 * 100 = 7.000000000000001
    return math.ceil(round(fraction * n, 9))


def _pick_bases(ds: Dataset, group: GroupLabel, k: int, rng: np.random.Generator) -> np.ndarray:
    cand = np.flatnonzero((ds.y == group[0]) & (ds.a == group[1]) & ~ds.is_poison)
    if len(cand) < k:
        raise DomainError(f"base group {group} has {len(cand)} samples, {k} poisons requested")
    return np.sort(rng.choice(cand, size=k, replace=False))


def _make_poisons(ds: Dataset, pos: np.ndarray, X: np.ndarray, labels: np.ndarray, kind: str) -> Dataset:
    start = ds.next_id()
    return Dataset(
        X=X, y=ds.y[pos], a=ds.a[pos], label=labels, provenance=np.full(len(pos), kind),
        ids=np.arange(start, start + len(pos)), base_id=ds.ids[pos], d=ds.d, C=ds.C, A=ds.A,
    )


def apply_trigger(x: np.ndarray, trigger: TriggerPattern) -> np.ndarray:
    """Copy of ``x`` (one vector or a batch) with the trigger coordinates overwritten."""
    out = np.array(x, dtype=float, copy=True)
    if trigger.indices:
        out[..., list(trigger.indices)] = trigger.values
    return out


def craft_dlbd(ds: Dataset, spec: AttackSpec, seed: int) -> tuple[Dataset, set[int]]:
    k = poison_count(spec.poison_fraction, len(ds))
    if k == 0:
        return ds, set()
    spec.trigger.check_dim(ds.d)
    pos = _pick_bases(ds, spec.base_group, k, np.random.default_rng(seed))
    X = apply_trigger(ds.X[pos], spec.trigger)
    poisons = _make_poisons(ds, pos, X, np.full(k, spec.resolved_target(ds.C)), AttackKind.DLBD.value)
    return ds.append(poisons), set(poisons.ids.tolist())


def craft_sa(ds: Dataset, spec: AttackSpec, seed: int) -> tuple[Dataset, set[int]]:
    """Exact feature copies of the attacked subpopulation with flipped labels."""
    k = poison_count(spec.poison_fraction, len(ds))
    if k == 0:
        return ds, set()
    pos = _pick_bases(ds, spec.base_group, k, np.random.default_rng(seed))
    poisons = _make_poisons(ds, pos, ds.X[pos].copy(), np.full(k, spec.resolved_target(ds.C)), AttackKind.SA.value)
    return ds.append(poisons), set(poisons.ids.tolist())


def train_crafting_model(clean: Dataset, cfg: TrainConfig, h: int = 32) -> ModelParams:
    """Surrogate ERM model used to compute gradients while crafting."""
    m, _ = train(ModelParams.init(clean.d, h, clean.C, seed=cfg.seed), clean, cfg)
    return m


def select_targets(test: Dataset, base_group: GroupLabel, n_targets: int, seed: int) -> Dataset:
    """Clean test samples drawn from outside the base group's class."""
    cand = np.flatnonzero((test.y != base_group.class_label) & ~test.is_poison)
    if len(cand) < n_targets:
        raise DomainError("not enough candidate targets")
    pos = np.sort(np.random.default_rng(seed).choice(cand, size=n_targets, replace=False))
    return test.subset(pos)


def alignment_loss(target_grad: np.ndarray, poison_grad: np.ndarray) -> float:
    """``1 - cos`` between two flat gradients."""
    nt, npg = np.linalg.norm(target_grad), np.linalg.norm(poison_grad)
    if nt == 0 or npg == 0:
        return 1.0
    return float(1.0 - target_grad @ poison_grad / (nt * npg))


def _alignment_and_input_grad(m, X, labels, target_grad):
    G = per_sample_gradients(m, X, labels)
    gp = G.mean(axis=0)
    nt, npg = np.linalg.norm(target_grad), np.linalg.norm(gp)
    if nt == 0 or npg == 0:
        return 1.0, np.zeros_like(X)
    cos = target_grad @ gp / (nt * npg)
    # d cos / d gp, then chain through the mean of per-sample gradients
    dcos = target_grad / (nt * npg) - cos * gp / npg**2
    return float(1.0 - cos), -input_vjp(m, X, labels, dcos) / len(X)


@dataclass(frozen=True)
class GMResult:
    dataset: Dataset
    poison_ids: set[int]
    alignment_loss: float
    initial_losses: tuple[float, ...]
    final_losses: tuple[float, ...]
    best_restart: int


def craft_gm(ds: Dataset, spec: AttackSpec, model: ModelParams, targets: Dataset, seed: int) -> GMResult:
    """Clean-label poisons whose training gradient imitates the adversarial target gradient.

    Targets are pushed towards the base group's class; each restart runs
    signed projected descent inside the max-norm ball and keeps its best
    iterate, and the restart with the lowest alignment loss wins.
    """
    cfg = spec.gm
    k = poison_count(spec.poison_fraction, len(ds))
    if k == 0:
        return GMResult(ds, set(), 1.0, (), (), 0)
    if len(targets) == 0:
        raise DomainError("gradient matching needs at least one target")
    rng = np.random.default_rng(seed)
    pos = _pick_bases(ds, spec.base_group, k, rng)
    base = ds.X[pos]
    labels = ds.y[pos]
    adv = np.full(len(targets), spec.base_group.class_label)
    target_grad = gradient(model, targets.X, adv)
    eps = cfg.epsilon
    best_X, best_loss, best_restart = base.copy(), np.inf, 0
    inits, finals = [], []
    for r in range(cfg.restarts):
        delta = rng.uniform(-eps, eps, size=base.shape) if eps > 0 else np.zeros_like(base)
        loss, grad = _alignment_and_input_grad(model, base + delta, labels, target_grad)
        inits.append(loss)
        run_best, run_delta = loss, delta.copy()
        for _ in range(cfg.steps):
            if eps == 0:
                break
            delta = np.clip(delta - cfg.step_size * np.sign(grad), -eps, eps)
            loss, grad = _alignment_and_input_grad(model, base + delta, labels, target_grad)
            if not np.isfinite(loss):
                raise CraftingError("alignment loss became non-finite")
            if loss < run_best:
                run_best, run_delta = loss, delta.copy()
        if not np.isfinite(run_best):
            raise CraftingError("alignment loss became non-finite")
        finals.append(run_best)
        if run_best < best_loss:
            best_loss, best_X, best_restart = run_best, base + run_delta, r
    poisons = _make_poisons(ds, pos, best_X, labels, AttackKind.GM.value)
    return GMResult(ds.append(poisons), set(poisons.ids.tolist()), float(best_loss), tuple(inits), tuple(finals), best_restart)


def craft(ds: Dataset, spec: AttackSpec, seed: int, **gm_inputs) -> tuple[Dataset, set[int]]:
    """Dispatch on ``spec.kind``; gradient matching needs ``model`` and ``targets``."""
    if spec.kind == AttackKind.DLBD:
        return craft_dlbd(ds, spec, seed)
    if spec.kind == AttackKind.SA:
        return craft_sa(ds, spec, seed)
    res = craft_gm(ds, spec, gm_inputs["model"], gm_inputs["targets"], seed)
    return res.dataset, res.poison_ids


def poison_manifest(ds: Dataset) -> list[dict]:
    P = ds.is_poison
    return [
        {"id": int(i), "base_id": int(b), "kind": str(k)}
        for i, b, k in zip(ds.ids[P], ds.base_id[P], ds.provenance[P])
    ]


def save_manifest(ds: Dataset, path: str | Path) -> None:
    Path(path).write_text(json.dumps(poison_manifest(ds), indent=1))
