"""Scenario configuration, orchestration of repeated runs, sweeps and result files."""

from __future__ import annotations

import csv
import dataclasses
import enum
import hashlib
import io
import json
import time
import types
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import attacks, defenses, group_robust, metrics
from . import federated as fl
from .errors import ConfigurationError, GroupPoisonError
from .model import ModelParams, TrainConfig, evaluate, predict, train
from .synth_data import WATERBIRDS_PROPORTIONS, Dataset, GroupLabel, default_spec, generate_dataset, split

GROUP_KEYS = ("g00", "g01", "g10", "g11")


class MethodKind(str, enum.Enum):
    NONE = "none"
    JTT = "jtt"
    GEORGE = "george"


class DefenseKind(str, enum.Enum):
    NONE = "none"
    EPIC = "epic"
    STRIP = "strip"


@dataclass(frozen=True)
class DataConfig:
    n: int = 10000
    split: tuple[float, float, float] = (0.5, 0.2, 0.3)
    d: int = 20
    class_scale: float = 1.5
    spurious_scale: float = 3.0
    noise: float = 1.0
    proportions: tuple[tuple[float, ...], ...] = WATERBIRDS_PROPORTIONS

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError("n must be positive", "data.n")


@dataclass(frozen=True)
class MethodConfig:
    kind: MethodKind = MethodKind.NONE
    erm: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.01, weight_decay=0.03, epochs=30))
    jtt: group_robust.JTTConfig = field(default_factory=group_robust.JTTConfig)
    george: group_robust.GeorgeConfig = field(default_factory=group_robust.GeorgeConfig)


@dataclass(frozen=True)
class DefenseConfig:
    kind: DefenseKind = DefenseKind.NONE
    epic: defenses.EpicConfig = field(default_factory=defenses.EpicConfig)
    strip: defenses.StripConfig = field(default_factory=defenses.StripConfig)


@dataclass(frozen=True)
class CombinedConfig:
    stop_epochs: tuple[int, ...] = (0, 3, 5, 7)


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    data: DataConfig = field(default_factory=DataConfig)
    attack: attacks.AttackSpec | None = None
    method: MethodConfig = field(default_factory=MethodConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    federated: fl.FLConfig | None = None
    combined: CombinedConfig = field(default_factory=CombinedConfig)
    intervention: group_robust.Intervention = group_robust.Intervention.STANDARD
    repetitions: int = 3
    seed: int = 0
    hidden: int = 32

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigurationError("repetitions must be at least 1", "repetitions")
        if self.federated is not None and self.defense.kind != DefenseKind.NONE:
            raise ConfigurationError("federated runs cannot use a centralized defense", "defense")
        if self.federated is not None and self.method.kind != MethodKind.NONE:
            raise ConfigurationError("federated runs train with the aggregator only", "method")


# -- generic dataclass <-> JSON ------------------------------------------------

def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None:
            if type(None) in args:
                return None
            raise ConfigurationError("value may not be null", path)
        errors = []
        # try structured alternatives first so that dicts become dataclasses
        for arg in sorted((a for a in args if a is not type(None)), key=lambda a: not _is_dataclass_type(a)):
            try:
                return _convert(arg, value, path)
            except ConfigurationError as exc:
                errors.append(exc)
        raise errors[0]
    if tp is Any:
        return value
    if _is_dataclass_type(tp):
        if value == "default":
            value = {}
        elif isinstance(value, str) and tp in _SHORTHAND:
            value = {_SHORTHAND[tp]: value}
        if not isinstance(value, dict):
            raise ConfigurationError(f"expected an object, got {type(value).__name__}", path)
        return build(tp, value, path)
    if tp is GroupLabel:
        if not isinstance(value, (list, tuple)) or len(value) != 2:
            raise ConfigurationError("expected [class, attribute]", path)
        return GroupLabel(int(value[0]), int(value[1]))
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(str(value).lower())
        except ValueError:
            raise ConfigurationError(f"unknown value {value!r}; expected one of {[m.value for m in tp]}", path) from None
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError("expected a list", path)
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigurationError(f"expected {len(args)} entries", path)
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError("expected true or false", path)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError("expected an integer", path)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError("expected a number", path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError("expected a string", path)
        return value
    raise ConfigurationError(f"unsupported field type {tp!r}", path)


# shorthand spellings accepted in place of full objects
_SHORTHAND = {
    MethodConfig: "kind",
    DefenseConfig: "kind",
    attacks.AttackSpec: "kind",
    fl.Aggregator: "kind",
}


def build(cls, doc: dict, path: str = ""):
    """Instantiate dataclass ``cls`` from ``doc``, rejecting unknown keys."""
    if not isinstance(doc, dict):
        raise ConfigurationError(f"expected an object, got {type(doc).__name__}", path or "<root>")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(doc) - names)
    if unknown:
        key = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigurationError("unknown key", key)
    kwargs = {}
    for name, value in doc.items():
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _convert(hints[name], value, sub)
    try:
        return cls(**kwargs)
    except ConfigurationError as exc:
        # validators report the field name only; anchor it at this object
        leaf = (exc.path or "").split(".")[-1]
        raise ConfigurationError(exc.message, ".".join(p for p in (path, leaf) if p) or "<root>") from None
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc), path or "<root>") from None


def to_doc(obj) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_doc(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, tuple):
        return [to_doc(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def parse_config(doc: dict) -> ScenarioConfig:
    return build(ScenarioConfig, doc)


def load_config(path: str | Path) -> ScenarioConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigurationError("file not found", str(path)) from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"invalid JSON ({exc.msg} at line {exc.lineno})", str(path)) from None
    return parse_config(doc)


def config_hash(cfg: ScenarioConfig) -> str:
    """SHA-256 of the canonical JSON of every field except the display name."""
    doc = to_doc(cfg)
    doc.pop("name", None)
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


# -- runs ----------------------------------------------------------------------

@dataclass
class ResultRecord:
    scenario: str
    report: metrics.MetricsReport
    runs: list[dict]
    wall_seconds: float
    config_hash: str
    errors: list[str] = field(default_factory=list)
    artifacts: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "config_hash": self.config_hash,
            "wall_seconds": self.wall_seconds,
            "report": self.report.to_flat(),
            "runs": self.runs,
            "errors": self.errors,
        }


class RunFailure(GroupPoisonError, RuntimeError):
    """Every repetition of a scenario failed."""


def derived_seeds(run_seed: int) -> tuple[int, int, int]:
    """Independent streams for data, attack and training."""
    return run_seed, run_seed ^ 1, run_seed ^ 2


@dataclass
class RunData:
    train: Dataset
    val: Dataset
    test: Dataset
    clean_train: Dataset
    poison_ids: set[int]
    targets: Dataset | None = None


def prepare_data(cfg: ScenarioConfig, run_seed: int) -> RunData:
    data_seed, attack_seed, train_seed = derived_seeds(run_seed)
    dc = cfg.data
    spec = default_spec(0.0, dc.d, dc.class_scale, dc.spurious_scale, dc.noise, dc.proportions)
    tr, va, te = split(generate_dataset(spec, dc.n, data_seed), dc.split, data_seed)
    atk = cfg.attack
    if atk is None or atk.poison_fraction == 0:
        return RunData(tr, va, te, tr, set())
    if atk.kind == attacks.AttackKind.GM:
        surrogate = attacks.train_crafting_model(tr, replace(cfg.method.erm, seed=attack_seed), cfg.hidden)
        targets = attacks.select_targets(te, atk.base_group, atk.gm.n_targets, attack_seed)
        res = attacks.craft_gm(tr, atk, surrogate, targets, attack_seed)
        return RunData(res.dataset, va, te, tr, res.poison_ids, targets)
    poisoned, ids = attacks.craft(tr, atk, attack_seed)
    return RunData(poisoned, va, te, tr, ids)


def _seeded(tc: TrainConfig, seed: int) -> TrainConfig:
    return replace(tc, seed=seed)


@dataclass
class FitResult:
    model: ModelParams
    values: dict
    artifact: dict | None = None


def _fit(cfg: ScenarioConfig, rd: RunData, ds: Dataset, train_seed: int) -> FitResult:
    """Train the configured method/defense on ``ds`` and collect set-based metrics."""
    mc, dcfg = cfg.method, cfg.defense
    values: dict = {}
    artifact = None
    if mc.kind == MethodKind.JTT:
        jc = replace(mc.jtt, identification=_seeded(mc.jtt.identification, train_seed), final=_seeded(mc.jtt.final, train_seed))
        res = group_robust.jtt_train(ds, jc, cfg.intervention, val=rd.val)
        poisons = set(ds.ids[ds.is_poison].tolist())
        if cfg.intervention == group_robust.Intervention.IDEAL and res.used.ids & poisons:
            raise RuntimeError("ideal intervention left poisons in the amplified set")
        values.update(metrics.group_factors(res.identified.ids, ds, "idnf"))
        return FitResult(res.model, values)
    if mc.kind == MethodKind.GEORGE:
        gc = replace(mc.george, erm=_seeded(mc.george.erm, train_seed), dro=_seeded(mc.george.dro, train_seed))
        res = group_robust.george_train(ds, gc, cfg.intervention, val=rd.val, seed=train_seed)
        small = {int(i) for c in res.groups.k_per_class for i in res.groups.ids[(res.groups.classes == c) & (res.groups.clusters == res.groups.smallest_cluster(c))]}
        values.update(metrics.group_factors(small, ds, "idnf"))
        return FitResult(res.model, values)
    if dcfg.kind == DefenseKind.EPIC:
        ec = replace(dcfg.epic, train=_seeded(dcfg.epic.train, train_seed))
        res = defenses.epic_train(ds, ec, cfg.intervention, val=rd.val, seed=train_seed)
        values.update(metrics.group_factors(res.log.eliminated(), ds, "elmf"))
        curve = []
        for r in res.log.checks:
            gone = res.log.eliminated(r.epoch)
            for k, v in metrics.group_factors(gone, ds, "elmf").items():
                curve.append((r.epoch, k[len("elmf_"):], v))
        artifact = {"kind": "elimination", "points": curve}
        return FitResult(res.model, values, artifact)
    m0 = ModelParams.init(ds.d, cfg.hidden, ds.C, seed=train_seed)
    model, _ = train(m0, ds, _seeded(mc.erm, train_seed), val=rd.val)
    if dcfg.kind == DefenseKind.STRIP:
        trigger = cfg.attack.trigger if cfg.attack else attacks.TriggerPattern()
        target = cfg.attack.resolved_target(ds.C) if cfg.attack else 1
        pool = rd.val.X[~rd.val.is_poison]
        curves = defenses.strip_sweep(model, defenses.strip_groups(rd.test, trigger, target), pool, dcfg.strip, train_seed)
        artifact = {"kind": "strip", "points": curves.rows()}
    return FitResult(model, values, artifact)


def _attack_metrics(cfg: ScenarioConfig, rd: RunData, model: ModelParams, train_seed: int) -> dict:
    atk = cfg.attack
    if atk is None:
        return {"asr": None}
    if atk.kind == attacks.AttackKind.DLBD:
        return {"asr": metrics.asr_dlbd(model, rd.test, atk.trigger, atk.resolved_target(rd.test.C))}
    if atk.kind == attacks.AttackKind.GM:
        return {"asr": metrics.asr_gm(model, rd.targets) if rd.targets is not None else None}
    # subpopulation: compare against the same pipeline trained without poisons
    clean = _fit(cfg, rd, rd.clean_train, train_seed).model
    g = atk.base_group
    members = (rd.test.y == g[0]) & (rd.test.a == g[1])
    if not members.any():
        return {"asr": None}
    acc_p = float(np.mean(predict(model, rd.test.X[members]) == rd.test.y[members]))
    acc_c = float(np.mean(predict(clean, rd.test.X[members]) == rd.test.y[members]))
    return {"asr": metrics.asr_sa(acc_c, acc_p)}


def _evaluation(model: ModelParams, test: Dataset) -> dict:
    ga, _ = evaluate(model, test)
    out = {"acc": ga.overall, "wga": metrics.wga(ga)}
    for g in test.groups:
        out[f"acc_{g}"] = ga.per_group.get(g)
    return out


def run_once(cfg: ScenarioConfig, run_seed: int) -> tuple[dict, dict | None]:
    rd = prepare_data(cfg, run_seed)
    _, _, train_seed = derived_seeds(run_seed)
    if cfg.federated is not None:
        trig = cfg.attack.trigger if cfg.attack and cfg.attack.kind == attacks.AttackKind.DLBD else None
        target = cfg.attack.resolved_target(rd.train.C) if cfg.attack else 1
        comp = fl.run_fl_experiment(rd.train, rd.test, cfg.federated, train_seed, trig, target)
        values = _evaluation(comp.defended.model, rd.test)
        values.update({"asr": comp.defended.asr, "delta_wga": comp.wga_drop, "delta_acc": comp.acc_drop})
        rounds = [(r.round, r.aggregator, r.wga) for r in comp.defended.rounds]
        return values, {"kind": "rounds", "points": rounds}
    fit = _fit(cfg, rd, rd.train, train_seed)
    values = _evaluation(fit.model, rd.test)
    values.update(_attack_metrics(cfg, rd, fit.model, train_seed))
    values.update(fit.values)
    return values, fit.artifact


def _record(name: str, chash: str, runs: list[dict], errors: list[str], artifacts: list, started: float) -> ResultRecord:
    if not runs:
        raise RunFailure(f"every repetition of {name} failed: {errors}")
    return ResultRecord(name, metrics.aggregate_runs(runs), runs, time.perf_counter() - started, chash, errors, artifacts)


def run_scenario(cfg: ScenarioConfig) -> ResultRecord:
    """``repetitions`` independent runs with seeds ``seed, seed+1, ...``."""
    if cfg.method.kind == MethodKind.JTT and cfg.defense.kind == DefenseKind.EPIC:
        raise ConfigurationError("JTT with EPIc is the combined pipeline; use run_combined", "defense")
    started = time.perf_counter()
    runs, errors, artifacts = [], [], []
    for i in range(cfg.repetitions):
        seed = cfg.seed + i
        try:
            values, art = run_once(cfg, seed)
            runs.append(values)
            artifacts.append(art)
        except (GroupPoisonError, ArithmeticError, RuntimeError) as exc:
            errors.append(f"seed {seed}: {type(exc).__name__}: {exc}")
    return _record(cfg.name, config_hash(cfg), runs, errors, artifacts, started)


def run_combined(cfg: ScenarioConfig, baselines: bool = True) -> list[ResultRecord]:
    """Suspected poisons from early EPIc checks are excluded from JTT's upsampled set.

    One record per stop epoch, then (optionally) the no-EPIc and ideal-EPIc
    baselines.  The EPIc pass and the identification model are shared by
    every variant of a run.
    """
    if cfg.method.kind != MethodKind.JTT or cfg.defense.kind != DefenseKind.EPIC:
        raise ConfigurationError("the combined pipeline needs method jtt and defense epic", "method")
    stops = sorted(set(cfg.combined.stop_epochs))
    variants = [f"stop={s}" for s in stops] + (["no_epic", "ideal_epic"] if baselines else [])
    started = time.perf_counter()
    runs: dict[str, list] = {v: [] for v in variants}
    errors: list[str] = []
    for i in range(cfg.repetitions):
        seed = cfg.seed + i
        try:
            rd = prepare_data(cfg, seed)
            _, _, train_seed = derived_seeds(seed)
            ds = rd.train
            last = max(stops) if stops else 0
            ec = replace(cfg.defense.epic, train=_seeded(cfg.defense.epic.train, train_seed), stop_epoch=last)
            log = defenses.epic_train(ds, ec, seed=train_seed, epochs=last).log if last > 0 else defenses.EliminationLog()
            jc = replace(cfg.method.jtt, identification=_seeded(cfg.method.jtt.identification, train_seed), final=_seeded(cfg.method.jtt.final, train_seed))
            identified = group_robust.jtt_identify(ds, jc)
            poisons = set(ds.ids[ds.is_poison].tolist())
            excludes = {f"stop={s}": log.flagged(s) for s in stops}
            if baselines:
                excludes["no_epic"] = set()
                excludes["ideal_epic"] = poisons
            for v in variants:
                res = group_robust.jtt_train(ds, jc, group_robust.Intervention.STANDARD, val=rd.val, exclude=excludes[v], identified=identified)
                values = _evaluation(res.model, rd.test)
                values.update(_attack_metrics(cfg, rd, res.model, train_seed))
                values.update(metrics.group_factors(res.used.ids, ds, "idnf"))
                values.update(metrics.group_factors(excludes[v], ds, "excluded"))
                runs[v].append(values)
        except (GroupPoisonError, ArithmeticError, RuntimeError) as exc:
            errors.append(f"seed {seed}: {type(exc).__name__}: {exc}")
    base_hash = config_hash(cfg)
    return [_record(f"{cfg.name}/{v}", f"{base_hash}/{v}", runs[v], errors, [], started) for v in variants]


# -- sweeps ----------------------------------------------------------------

def _set_poison_fraction(cfg, v):
    return replace(cfg, attack=replace(cfg.attack or attacks.AttackSpec(), poison_fraction=float(v)))


def _set_trigger(cfg, v):
    atk = cfg.attack or attacks.AttackSpec()
    return replace(cfg, attack=replace(atk, trigger=attacks.TriggerPattern.uniform(float(v), atk.trigger.indices)))


def _set_gm_targets(cfg, v):
    atk = cfg.attack or attacks.AttackSpec(kind=attacks.AttackKind.GM)
    return replace(cfg, attack=replace(atk, gm=replace(atk.gm, n_targets=int(v))))


def _set_aggregator(cfg, v):
    flc = cfg.federated or fl.FLConfig()
    agg = v if isinstance(v, fl.Aggregator) else build(fl.Aggregator, v if isinstance(v, dict) else {"kind": v}, "aggregator")
    return replace(cfg, federated=replace(flc, aggregator=agg))


def _set_stop(cfg, v):
    if cfg.method.kind == MethodKind.JTT and cfg.defense.kind == DefenseKind.EPIC:
        return replace(cfg, combined=CombinedConfig((int(v),)))
    return replace(cfg, defense=replace(cfg.defense, epic=replace(cfg.defense.epic, stop_epoch=int(v))))


SWEEP_AXES = {
    "early_stop": lambda c, v: replace(c, method=replace(c.method, jtt=replace(c.method.jtt, identification_epochs=int(v)))),
    "upsample": lambda c, v: replace(c, method=replace(c.method, jtt=replace(c.method.jtt, upsample=int(v)))),
    "poison_fraction": _set_poison_fraction,
    "trigger_magnitude": _set_trigger,
    "gm_targets": _set_gm_targets,
    "aggregator": _set_aggregator,
    "stop_epoch": _set_stop,
}


def sweep_configs(cfg: ScenarioConfig, axis: str, values: Sequence) -> list[ScenarioConfig]:
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"unknown sweep axis; expected one of {sorted(SWEEP_AXES)}", "sweep")
    out = []
    for v in values:
        c = SWEEP_AXES[axis](cfg, v)
        out.append(replace(c, name=f"{cfg.name}/{axis}={_sweep_label(v)}"))
    return out


def _sweep_label(value) -> str:
    if isinstance(value, dict):
        rest = ";".join(f"{k}={value[k]}" for k in sorted(value) if k != "kind")
        kind = value.get("kind", "")
        return f"{kind}({rest})" if rest else str(kind)
    return str(value)


def run_sweep(cfg: ScenarioConfig, axis: str, values: Sequence) -> list[ResultRecord]:
    records = []
    for c in sweep_configs(cfg, axis, values):
        if c.method.kind == MethodKind.JTT and c.defense.kind == DefenseKind.EPIC:
            records.extend(run_combined(c, baselines=False))
        else:
            records.append(run_scenario(c))
    return records


# -- output ----------------------------------------------------------------

METRIC_COLUMNS = (
    ["acc", "wga", "asr"]
    + [f"acc_{g}" for g in GROUP_KEYS]
    + [f"idnf_{g}" for g in GROUP_KEYS + ("poison",)]
    + [f"elmf_{g}" for g in GROUP_KEYS + ("poison",)]
    + ["delta_wga", "delta_acc"]
)
CSV_COLUMNS = ["scenario", "config_hash", "n_runs"] + [f"{m}_{s}" for m in METRIC_COLUMNS for s in ("mean", "std")]


def _fmt(v) -> str:
    return "" if v is None else repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def csv_text(records: Sequence[ResultRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        flat = r.report.to_flat()
        w.writerow([r.scenario, r.config_hash, flat["n_runs"]] + [_fmt(flat.get(c)) for c in CSV_COLUMNS[3:]])
    return buf.getvalue()


def plot_rows(records: Sequence[ResultRecord]) -> list[tuple]:
    """Long format ``(x, series, y)`` from the first run's curve of each record."""
    rows = []
    for r in records:
        art = next((a for a in r.artifacts if a), None)
        if art is None:
            continue
        for x, series, y in art["points"]:
            rows.append((x, f"{r.scenario}/{art['kind']}/{series}", y))
    return rows


def emit(records: Sequence[ResultRecord], fmt: str, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        path = out / "results.csv"
        path.write_text(csv_text(records))
    elif fmt == "json":
        path = out / "results.json"
        path.write_text(json.dumps([r.to_json() for r in records], indent=1))
    elif fmt == "plot":
        path = out / "plot_data.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "series", "y"])
            for x, s, y in plot_rows(records):
                w.writerow([_fmt(x), s, _fmt(y)])
    else:
        raise ConfigurationError(f"unknown output format {fmt!r}", "format")
    return path
