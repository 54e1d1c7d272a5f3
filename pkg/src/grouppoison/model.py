"""One-hidden-layer ReLU softmax classifier with explicit gradients.

Parameters live in a single flat vector laid out as ``W1 (d*h), b1 (h),
W2 (h*C), b2 (C)``.  All derivatives are analytic; the test-suite checks them
against central finite differences.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigurationError, DomainError
from .synth_data import Dataset


LOG_FLOOR = 1e-12
POISON_GROUP = "poison"


@dataclass(frozen=True, eq=False)
class ModelParams:
    values: np.ndarray
    d: int
    h: int
    C: int

    def __post_init__(self):
        values = np.array(self.values, dtype=float).ravel()
        if len(values) != self.size(self.d, self.h, self.C):
            raise DomainError(f"expected {self.size(self.d, self.h, self.C)} parameters, got {len(values)}")
        if not np.all(np.isfinite(values)):
            raise DomainError("parameters must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @staticmethod
    def size(d: int, h: int, C: int) -> int:
        return d * h + h + h * C + C

    @classmethod
    def zeros(cls, d: int, h: int = 32, C: int = 2) -> "ModelParams":
        return cls(np.zeros(cls.size(d, h, C)), d, h, C)

    @classmethod
    def init(cls, d: int, h: int = 32, C: int = 2, seed: int = 0) -> "ModelParams":
        """He-normal hidden weights, Glorot output weights, zero biases."""
        rng = np.random.default_rng(seed)
        W1 = rng.standard_normal((d, h)) * np.sqrt(2.0 / d)
        W2 = rng.standard_normal((h, C)) * np.sqrt(1.0 / h)
        return cls.pack(W1, np.zeros(h), W2, np.zeros(C))

    @classmethod
    def pack(cls, W1, b1, W2, b2) -> "ModelParams":
        d, h = W1.shape
        C = W2.shape[1]
        return cls(np.concatenate([W1.ravel(), b1, W2.ravel(), b2]), d, h, C)

    def unpack(self, values: np.ndarray | None = None):
        return _unpack(self.values if values is None else values, self.d, self.h, self.C)

    def replace(self, values: np.ndarray) -> "ModelParams":
        return ModelParams(values, self.d, self.h, self.C)

    def to_json(self) -> dict:
        return {"d": self.d, "h": self.h, "C": self.C, "values": [float(v) for v in self.values]}

    @classmethod
    def from_json(cls, doc: Mapping) -> "ModelParams":
        return cls(np.asarray(doc["values"], dtype=float), int(doc["d"]), int(doc["h"]), int(doc["C"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "ModelParams":
        return cls.from_json(json.loads(Path(path).read_text()))


def _unpack(values: np.ndarray, d: int, h: int, C: int):
    i = 0
    W1 = values[i:i + d * h].reshape(d, h); i += d * h
    b1 = values[i:i + h]; i += h
    W2 = values[i:i + h * C].reshape(h, C); i += h * C
    b2 = values[i:i + C]
    return W1, b1, W2, b2


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class PredictionOutput:
    probs: np.ndarray
    latent: np.ndarray
    loss: float | None = None


def _check_dim(m: ModelParams, X: np.ndarray) -> None:
    if X.shape[-1] != m.d:
        raise DomainError(f"feature dimension {X.shape[-1]} does not match model dimension {m.d}")


def forward_batch(m: ModelParams, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities and hidden activations for a batch."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _check_dim(m, X)
    W1, b1, W2, b2 = m.unpack()
    latent = np.maximum(X @ W1 + b1, 0.0)
    return softmax(latent @ W2 + b2), latent


def forward(m: ModelParams, x: np.ndarray, label: int | None = None) -> PredictionOutput:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DomainError("forward expects a single feature vector")
    probs, latent = forward_batch(m, x[None])
    loss = None if label is None else float(-np.log(max(probs[0, label], LOG_FLOOR)))
    return PredictionOutput(probs[0], latent[0], loss)


def predict(m: ModelParams, X: np.ndarray) -> np.ndarray:
    return forward_batch(m, X)[0].argmax(axis=1)


def losses(m: ModelParams, X: np.ndarray, labels: np.ndarray) -> np.ndarray:
    probs, _ = forward_batch(m, X)
    p = probs[np.arange(len(probs)), np.asarray(labels)]
    return -np.log(np.maximum(p, LOG_FLOOR))


def per_sample_loss(m: ModelParams, x: np.ndarray, label: int) -> float:
    if not 0 <= label < m.C:
        raise DomainError("label out of range")
    return float(losses(m, np.asarray(x, dtype=float)[None], np.array([label]))[0])


def _backward(m: ModelParams, X: np.ndarray, labels: np.ndarray, values: np.ndarray | None = None):
    """Shared forward/backward pieces: inputs, mask, latent, error, hidden delta."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _check_dim(m, X)
    W1, b1, W2, b2 = _unpack(m.values if values is None else values, m.d, m.h, m.C)
    z1 = X @ W1 + b1
    mask = z1 > 0
    latent = np.where(mask, z1, 0.0)
    probs = softmax(latent @ W2 + b2)
    err = probs.copy()
    err[np.arange(len(X)), np.asarray(labels)] -= 1.0
    delta = (err @ W2.T) * mask
    return X, mask, latent, probs, err, delta


def per_sample_gradients(m: ModelParams, X: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of each sample's cross-entropy, one row per sample (no weight decay)."""
    X, _, latent, _, err, delta = _backward(m, X, labels)
    n = len(X)
    gW1 = np.einsum("ni,nj->nij", X, delta).reshape(n, -1)
    gW2 = np.einsum("ni,nj->nij", latent, err).reshape(n, -1)
    return np.concatenate([gW1, delta, gW2, err], axis=1)


def gradient(
    m: ModelParams,
    X: np.ndarray,
    labels: np.ndarray,
    weight_decay: float = 0.0,
    weights: np.ndarray | None = None,
    values: np.ndarray | None = None,
) -> np.ndarray:
    """Gradient of the (weighted) mean cross-entropy plus ``weight_decay * theta``.

    ``weights`` replaces the uniform ``1/n`` averaging weights when given.
    """
    X, _, latent, _, err, delta = _backward(m, X, labels, values)
    if len(X) == 0:
        raise DomainError("gradient of an empty batch")
    w = np.full(len(X), 1.0 / len(X)) if weights is None else np.asarray(weights, dtype=float)
    err_w = err * w[:, None]
    delta_w = delta * w[:, None]
    g = np.concatenate([(X.T @ delta_w).ravel(), delta_w.sum(0), (latent.T @ err_w).ravel(), err_w.sum(0)])
    if weight_decay:
        g = g + weight_decay * (m.values if values is None else values)
    return g


def last_layer_gradients(m: ModelParams, X: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample gradient w.r.t. the output layer: ``err (x) [latent, 1]``."""
    _, _, latent, _, err, _ = _backward(m, X, labels)
    n = len(latent)
    aug = np.concatenate([latent, np.ones((n, 1))], axis=1)
    return np.einsum("ni,nj->nij", aug, err).reshape(n, -1)


def input_vjp(m: ModelParams, X: np.ndarray, labels: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Row ``i`` is ``d/dx_i <U, per_sample_gradient(x_i, label_i)>``.

    A mixed second derivative (parameters, then input), needed to move a
    sample so that its parameter gradient turns towards ``U``.  ReLU masks are
    treated as locally constant.
    """
    X, mask, latent, probs, err, delta = _backward(m, X, labels)
    _, _, W2, _ = m.unpack()
    W1, _, _, _ = m.unpack()
    U_W1, U_b1, U_W2, U_b2 = m.unpack(np.asarray(U, dtype=float))
    # phi = x^T U_W1 delta + U_b1 . delta + latent^T U_W2 err + U_b2 . err
    r = X @ U_W1 + U_b1                            # coefficient of delta
    g_err = ((r * mask) @ W2) + latent @ U_W2 + U_b2
    # softmax Jacobian: J v = p * (v - p.v)
    g_z2 = probs * (g_err - (probs * g_err).sum(1, keepdims=True))
    g_latent = g_z2 @ W2.T + err @ U_W2.T
    return (g_latent * mask) @ W1.T + delta @ U_W1.T


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError("learning rate must be positive", "lr")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)", "momentum")
        if self.weight_decay < 0:
            raise ConfigurationError("weight decay must be non-negative", "weight_decay")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be at least 1", "batch_size")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative", "epochs")


class SGD:
    """Mini-batch SGD with heavy-ball momentum and L2 weight decay.

    The update follows the usual ``v <- mu v + g + wd theta; theta <- theta - lr v``.
    """

    def __init__(self, m0: ModelParams, cfg: TrainConfig, rng: np.random.Generator | None = None):
        self.template = m0
        self.theta = np.array(m0.values, dtype=float)
        self.velocity = np.zeros_like(self.theta)
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)

    @property
    def params(self) -> ModelParams:
        return self.template.replace(self.theta.copy())

    def step(self, X: np.ndarray, labels: np.ndarray, weights: np.ndarray | None = None) -> None:
        g = gradient(self.template, X, labels, self.cfg.weight_decay, weights, values=self.theta)
        self.velocity = self.cfg.momentum * self.velocity + g
        self.theta = self.theta - self.cfg.lr * self.velocity

    def epoch(
        self,
        X: np.ndarray,
        labels: np.ndarray,
        rows: np.ndarray,
        weight_fn: Callable[[np.ndarray], np.ndarray] | None = None,
        on_batch: Callable[[np.ndarray], None] | None = None,
    ) -> None:
        """One pass over ``rows`` (positions into ``X``, repeats allowed), shuffled."""
        rows = np.asarray(rows)
        order = rows[self.rng.permutation(len(rows))]
        bs = self.cfg.batch_size
        for start in range(0, len(order), bs):
            batch = order[start:start + bs]
            if on_batch is not None:
                on_batch(batch)
            w = weight_fn(batch) if weight_fn is not None else None
            self.step(X[batch], labels[batch], w)


def replicate_rows(ds: Dataset, sample_weights: Mapping[int, int] | None) -> np.ndarray:
    """Row positions with each id repeated by its integer multiplicity (default 1)."""
    if not sample_weights:
        return np.arange(len(ds))
    mult = np.ones(len(ds), dtype=np.int64)
    pos = ds.positions(list(sample_weights.keys()))
    w = np.fromiter(sample_weights.values(), dtype=np.int64, count=len(sample_weights))
    if np.any(w < 0):
        raise DomainError("sample multiplicities must be non-negative")
    mult[pos] = w
    return np.repeat(np.arange(len(ds)), mult)


@dataclass(frozen=True)
class GroupAccuracies:
    """Accuracy per ground-truth group; groups without samples are absent."""

    per_group: dict
    counts: dict
    overall: float | None

    def clean_groups(self) -> dict:
        return {g: v for g, v in self.per_group.items() if g != POISON_GROUP}


def evaluate(m: ModelParams, ds: Dataset) -> tuple[GroupAccuracies, set[int]]:
    """Per-group accuracy (poisons as their own pseudo-group) and misclassified ids.

    Correctness is judged against each sample's training ``label``.  The
    overall accuracy covers clean samples only.
    """
    if len(ds) == 0:
        return GroupAccuracies({}, {}, None), set()
    correct = predict(m, ds.X) == ds.label
    per_group, counts = {}, {}
    clean = ~ds.is_poison
    for g in ds.groups:
        mask = clean & (ds.y == g[0]) & (ds.a == g[1])
        if mask.any():
            per_group[g] = float(correct[mask].mean())
            counts[g] = int(mask.sum())
    if ds.is_poison.any():
        per_group[POISON_GROUP] = float(correct[ds.is_poison].mean())
        counts[POISON_GROUP] = int(ds.is_poison.sum())
    overall = float(correct[clean].mean()) if clean.any() else None
    return GroupAccuracies(per_group, counts, overall), set(ds.ids[~correct].tolist())


@dataclass
class TrainLog:
    epochs_run: int = 0
    val_wga: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    selected_epoch: int = 0


def train(
    m0: ModelParams,
    ds: Dataset,
    cfg: TrainConfig,
    sample_weights: Mapping[int, int] | None = None,
    val: Dataset | None = None,
    weight_fn: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Shuffled mini-batch SGD over ``ds`` with per-id replication.

    With ``val`` the returned model is the epoch with the best validation
    worst-group accuracy (earliest on ties); otherwise the last epoch.
    """
    if len(ds) == 0:
        raise DomainError("cannot train on an empty dataset")
    log = TrainLog()
    if cfg.epochs == 0:
        return m0, log
    rows = replicate_rows(ds, sample_weights)
    opt = SGD(m0, cfg)
    best, best_wga = None, -np.inf
    for epoch in range(1, cfg.epochs + 1):
        opt.epoch(ds.X, ds.label, rows, weight_fn)
        log.epochs_run = epoch
        if val is not None:
            ga, _ = evaluate(opt.params, val)
            wga = min(ga.clean_groups().values())
            log.val_wga.append(wga)
            log.val_acc.append(ga.overall)
            if wga > best_wga:
                best, best_wga, log.selected_epoch = opt.params, wga, epoch
    if val is None:
        log.selected_epoch = cfg.epochs
        return opt.params, log
    return best, log
