"""Numerical checks of when loss thresholding cannot tell minority samples from poisons."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .errors import ConfigurationError, DomainError
from .model import ModelParams, forward_batch
from .synth_data import Dataset, GroupLabel

MC_BATCH = 1 << 18


def cantelli_bound(sigma: float, t: float) -> float:
    """One-sided tail bound ``P(X - mu >= t) <= sigma^2 / (sigma^2 + t^2)``."""
    if not t > 0:
        raise DomainError("t must be positive")
    if sigma < 0:
        raise DomainError("sigma must be non-negative")
    return sigma**2 / (sigma**2 + t**2)


def separation_sigma_bound(epsilon: float, mu_c: float, mu_p: float) -> float:
    """Largest common std under which ``P(G_p < G_c) > 1 - epsilon`` is guaranteed.

    ``G_c`` and ``G_p`` are the class probabilities of a minority sample and
    of a poison, with means ``mu_c > mu_p``.
    """
    if not 0 < epsilon < 1:
        raise DomainError("epsilon must lie in (0, 1)")
    if not mu_p < mu_c:
        raise DomainError("the poison mean must lie below the minority mean")
    return math.sqrt(1.0 / math.sqrt(1.0 - epsilon) - 1.0) * (mu_c - mu_p) / 2.0


class Family(str, Enum):
    BETA = "beta"
    TRUNCATED_GAUSSIAN = "truncated_gaussian"


@dataclass(frozen=True)
class ClassProbDistribution:
    """A distribution on (0, 1] pinned down by its mean and standard deviation."""

    family: Family
    mean: float
    std: float

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if not 0 < self.mean < 1:
            raise DomainError("mean must lie in (0, 1)")
        if self.std < 0:
            raise DomainError("std must be non-negative")
        if self.std > 0:
            self._frozen()  # raises when unrealizable

    def beta_params(self) -> tuple[float, float]:
        mu, s = self.mean, self.std
        nu = mu * (1 - mu) / s**2 - 1
        if nu <= 0:
            raise DomainError(f"Beta cannot have mean {mu} and std {s}")
        return mu * nu, (1 - mu) * nu

    def _truncnorm_params(self) -> tuple[float, float]:
        def moments(p):
            loc, log_scale = p
            scale = math.exp(log_scale)
            a, b = (0 - loc) / scale, (1 - loc) / scale
            m, v = stats.truncnorm.stats(a, b, loc=loc, scale=scale, moments="mv")
            return [float(m) - self.mean, math.sqrt(max(float(v), 0.0)) - self.std]

        sol = optimize.least_squares(moments, [self.mean, math.log(self.std)], xtol=1e-14, ftol=1e-14, gtol=1e-14)
        if max(abs(r) for r in moments(sol.x)) > 1e-8:
            raise DomainError(f"truncated Gaussian cannot have mean {self.mean} and std {self.std}")
        return float(sol.x[0]), float(math.exp(sol.x[1]))

    def _frozen(self):
        if self.family == Family.BETA:
            return stats.beta(*self.beta_params())
        loc, scale = self._truncnorm_params()
        return stats.truncnorm((0 - loc) / scale, (1 - loc) / scale, loc=loc, scale=scale)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.std == 0:
            return np.full(n, self.mean)
        return np.asarray(self._frozen().rvs(size=n, random_state=rng), dtype=float)


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float
    n: int


def mc_loss_comparison(
    dist_c: ClassProbDistribution,
    dist_p: ClassProbDistribution,
    n: int,
    seed: int,
    compare: str = "loss",
) -> Estimate:
    """Monte Carlo estimate of ``P(-log G_c < -log G_p)`` with its binomial standard error.

    ``compare="prob"`` evaluates the equivalent event ``G_p < G_c`` directly.
    Batches draw from child seeds of ``seed`` and are summed in order.
    """
    if n < 1:
        raise DomainError("n must be positive")
    if compare not in ("loss", "prob"):
        raise ConfigurationError(f"unknown comparison {compare!r}", "compare")
    n_batches = -(-n // MC_BATCH)
    hits = 0
    for b, child in enumerate(np.random.SeedSequence(seed).spawn(n_batches)):
        m = min(MC_BATCH, n - b * MC_BATCH)
        rng = np.random.default_rng(child)
        gc = dist_c.sample(m, rng)
        gp = dist_p.sample(m, rng)
        if compare == "loss":
            with np.errstate(divide="ignore"):
                hits += int(np.count_nonzero(-np.log(gc) < -np.log(gp)))
        else:
            hits += int(np.count_nonzero(gp < gc))
    p = hits / n
    return Estimate(p, math.sqrt(p * (1 - p) / n), n)


@dataclass(frozen=True)
class ClassProbReport:
    """Mean probability of the assigned label per clean group and for the poisons."""

    per_group: dict
    poison: float | None
    poison_on_base_class: float | None
    complement_error: float | None

    @property
    def poison_is_strict_minimum(self) -> bool:
        return self.poison is not None and all(self.poison < v for v in self.per_group.values())


def expected_class_probabilities(model: ModelParams, ds: Dataset) -> ClassProbReport:
    """Per-group mean probability of each sample's label, plus the complement check.

    On the poisons' own features the probabilities of the flipped label and
    of the base class must sum to one for a binary task.
    """
    if ds.C != 2:
        raise DomainError("the complement identity needs a binary task")
    probs, _ = forward_batch(model, ds.X) if len(ds) else (np.zeros((0, 2)), None)
    p_label = probs[np.arange(len(ds)), ds.label] if len(ds) else np.zeros(0)
    per_group = {}
    clean = ~ds.is_poison
    for g in ds.groups:
        mask = clean & (ds.y == g[0]) & (ds.a == g[1])
        if mask.any():
            per_group[GroupLabel(*g)] = float(p_label[mask].mean())
    P = ds.is_poison
    if not P.any():
        return ClassProbReport(per_group, None, None, None)
    p_star = float(p_label[P].mean())
    p_base = float(probs[np.flatnonzero(P), ds.y[P]].mean())
    return ClassProbReport(per_group, p_star, p_base, abs(p_star + p_base - 1.0))


@dataclass(frozen=True)
class SeparationCheckConfig:
    epsilons: tuple[float, ...] = (0.05, 0.1, 0.2, 0.4)
    mu_c: float = 0.7
    mu_p: float = 0.3
    n_samples: int = 1_000_000
    seed: int = 0

    def __post_init__(self):
        if not self.mu_p < self.mu_c:
            raise ConfigurationError("the poison mean must lie below the minority mean", "mu_p")
        if self.n_samples < 10_000:
            raise ConfigurationError("at least 10^4 samples are required", "n_samples")
        if any(not 0 < e < 1 for e in self.epsilons):
            raise ConfigurationError("epsilons must lie in (0, 1)", "epsilons")


@dataclass(frozen=True)
class GridPoint:
    epsilon: float
    sigma: float
    estimate: float | None
    stderr: float | None
    threshold: float
    passed: bool | None
    note: str = ""

    @property
    def margin(self) -> float | None:
        return None if self.estimate is None else self.estimate - self.threshold


def verify_separation_bound(cfg: SeparationCheckConfig, family: Family | str = Family.BETA, sigmas: Sequence[float] | None = None) -> list[GridPoint]:
    """Check ``estimate > (1 - eps) - 3 SE`` at the critical std of every epsilon.

    ``sigmas`` overrides the critical std (for example with zeros).
    """
    family = Family(family)
    out = []
    for i, eps in enumerate(cfg.epsilons):
        sigma = separation_sigma_bound(eps, cfg.mu_c, cfg.mu_p) if sigmas is None else float(sigmas[i])
        try:
            dc = ClassProbDistribution(family, cfg.mu_c, sigma)
            dp = ClassProbDistribution(family, cfg.mu_p, sigma)
        except DomainError as exc:
            out.append(GridPoint(eps, sigma, None, None, 1 - eps, None, str(exc)))
            continue
        est = mc_loss_comparison(dc, dp, cfg.n_samples, cfg.seed + i)
        threshold = (1 - eps) - 3 * est.stderr
        out.append(GridPoint(eps, sigma, est.value, est.stderr, threshold, est.value > threshold))
    return out


def write_report(points: Sequence[GridPoint], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epsilon", "sigma", "estimate", "stderr", "threshold", "pass"])
        for p in points:
            w.writerow([p.epsilon, p.sigma, p.estimate, p.stderr, p.threshold, p.passed])
