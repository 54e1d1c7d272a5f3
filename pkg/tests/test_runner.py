import csv
import io
import json
from dataclasses import replace

import pytest

from grouppoison import runner
from grouppoison.attacks import AttackKind
from grouppoison.errors import ConfigurationError
from grouppoison.federated import AggregatorKind
from grouppoison.group_robust import Intervention
from grouppoison.runner import (
    CSV_COLUMNS, DefenseKind, MethodKind, ScenarioConfig, config_hash, csv_text, emit, load_config, parse_config,
    plot_rows, run_combined, run_scenario, run_sweep, sweep_configs, to_doc,
)

FAST_TRAIN = {"lr": 0.01, "weight_decay": 0.03, "epochs": 3}


def tiny(**overrides):
    doc = {
        "name": "tiny",
        "data": {"n": 600},
        "attack": {"kind": "dlbd", "poison_fraction": 0.02},
        "method": {"kind": "jtt", "jtt": {"identification_epochs": 2, "final": FAST_TRAIN}},
        "repetitions": 2,
    }
    doc.update(overrides)
    return doc


def test_minimal_document_defaults():
    cfg = parse_config({"data": "default", "method": "JTT"})
    assert cfg.method.kind == MethodKind.JTT
    assert cfg == ScenarioConfig(method=replace(ScenarioConfig().method, kind=MethodKind.JTT))
    assert cfg.repetitions == 3 and cfg.data.n == 10000 and cfg.attack is None


def test_invalid_documents():
    with pytest.raises(ConfigurationError) as exc:
        parse_config({"repetitions": 0})
    assert exc.value.path == "repetitions"
    with pytest.raises(ConfigurationError) as exc:
        parse_config({"method": {"kind": "jtt", "jtt": {"upsample": 0}}})
    assert exc.value.path == "method.jtt.upsample"
    with pytest.raises(ConfigurationError) as exc:
        parse_config({"data": {"bogus": 1}})
    assert exc.value.path == "data.bogus"
    with pytest.raises(ConfigurationError):
        parse_config({"method": "magic"})
    with pytest.raises(ConfigurationError):
        parse_config({"federated": {}, "defense": "epic"})


def test_round_trip():
    cfg = parse_config(tiny(defense={"kind": "strip", "strip": {"overlays": 3}}, method="none", intervention="ideal"))
    assert parse_config(json.loads(json.dumps(to_doc(cfg)))) == cfg
    fed = parse_config({"federated": {"aggregator": "trimmed_mean", "partition": {"minority_holder_fraction": 0.1}}})
    assert parse_config(to_doc(fed)) == fed
    assert fed.federated.aggregator.kind == AggregatorKind.TRIMMED_MEAN


def test_load_config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(tiny()))
    assert load_config(path) == parse_config(tiny())
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.json")
    path.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_config(path)


def test_config_hash():
    doc = tiny()
    reordered = dict(reversed(list(doc.items())))
    assert config_hash(parse_config(doc)) == config_hash(parse_config(reordered))
    assert config_hash(parse_config(doc)) == config_hash(parse_config({**doc, "name": "other"}))
    assert config_hash(parse_config(doc)) != config_hash(parse_config({**doc, "seed": 1}))
    assert config_hash(parse_config(doc)) != config_hash(parse_config(tiny(attack={"kind": "dlbd", "poison_fraction": 0.03})))
    # spelling a default explicitly does not change the hash
    assert config_hash(parse_config(doc)) == config_hash(parse_config({**doc, "hidden": 32}))


@pytest.fixture(scope="module")
def jtt_record():
    return run_scenario(parse_config(tiny()))


def test_run_scenario_shape_and_determinism(jtt_record):
    rec = jtt_record
    assert len(rec.runs) == 2 and rec.report["acc"].n_runs == 2
    assert rec.config_hash == config_hash(parse_config(tiny()))
    assert {"acc", "wga", "asr", "idnf_poison", "acc_g10"} <= set(rec.runs[0])
    again = run_scenario(parse_config(tiny()))
    assert again.runs == rec.runs and csv_text([again]) == csv_text([rec])


def test_seed_isolation(jtt_record):
    more = run_scenario(parse_config(tiny(repetitions=3)))
    assert more.runs[:2] == jtt_record.runs


def test_ideal_jtt_runs():
    rec = run_scenario(parse_config(tiny(intervention="ideal", repetitions=1)))
    assert rec.errors == [] and len(rec.runs) == 1


def test_other_scenarios_run():
    fast = {"epochs": 4}
    docs = [
        tiny(method={"kind": "none", "erm": fast}, defense={"kind": "epic", "epic": {"train": fast}}, repetitions=1),
        tiny(method={"kind": "none", "erm": fast}, defense={"kind": "strip"}, repetitions=1),
        tiny(method={"kind": "george", "george": {"erm": fast, "dro": {"epochs": 2}}}, repetitions=1),
        tiny(method={"kind": "none", "erm": fast}, attack={"kind": "sa", "poison_fraction": 0.02, "base_group": [1, 1]}, repetitions=1),
        tiny(method={"kind": "none", "erm": fast}, attack={"kind": "gm", "gm": {"restarts": 1, "steps": 2}}, repetitions=1),
        tiny(method="none", federated={"n_clients": 5, "participation": 0.4, "rounds": 2, "local_epochs": 1}, repetitions=1),
    ]
    for doc in docs:
        rec = run_scenario(parse_config(doc))
        assert rec.errors == [], rec.errors
        assert rec.runs[0]["acc"] is not None
    assert "elmf_poison" in run_scenario(parse_config(docs[0])).runs[0]
    assert "delta_wga" in run_scenario(parse_config(docs[-1])).runs[0]


def test_epic_plot_rows():
    fast = {"epochs": 5}
    cfg = parse_config(tiny(method={"kind": "none", "erm": fast}, defense={"kind": "epic", "epic": {"train": fast}}, repetitions=1))
    rec = run_scenario(cfg)
    rows = plot_rows([rec])
    checks = sorted({x for x, _, _ in rows})
    assert checks == [3, 4, 5]
    # one row per (check epoch, group)
    assert len(rows) == len(set((x, s) for x, s, _ in rows)) == len(checks) * 5


def test_combined_pipeline():
    doc = tiny(defense={"kind": "epic", "epic": {"train": {"epochs": 5}}}, repetitions=1, combined={"stop_epochs": [0, 3]})
    cfg = parse_config(doc)
    with pytest.raises(ConfigurationError):
        run_scenario(cfg)
    recs = run_combined(cfg)
    names = [r.scenario for r in recs]
    assert names == ["tiny/stop=0", "tiny/stop=3", "tiny/no_epic", "tiny/ideal_epic"]
    by = {r.scenario: r for r in recs}
    plain = run_scenario(parse_config({**doc, "defense": "none"}))
    for key in ("acc", "wga", "asr"):
        assert by["tiny/stop=0"].runs[0][key] == plain.runs[0][key] == by["tiny/no_epic"].runs[0][key]
    ideal = by["tiny/ideal_epic"].runs[0]
    assert ideal["excluded_poison"] == 1.0
    assert all(ideal[f"excluded_{g}"] == 0.0 for g in runner.GROUP_KEYS)
    assert by["tiny/stop=0"].runs[0]["excluded_poison"] == 0.0
    assert len({r.config_hash for r in recs}) == 4


def test_sweeps():
    cfg = parse_config(tiny())
    assert len(sweep_configs(cfg, "poison_fraction", [0.004, 0.006, 0.008, 0.01, 0.02])) == 5
    ups = sweep_configs(cfg, "upsample", [20, 50, 100, 150])
    assert [c.method.jtt.upsample for c in ups] == [20, 50, 100, 150]
    assert sweep_configs(cfg, "trigger_magnitude", [2.0])[0].attack.trigger.values == (2.0, 2.0)
    assert sweep_configs(cfg, "gm_targets", [100])[0].attack.gm.n_targets == 100
    fed = parse_config(tiny(method="none", federated="default"))
    assert sweep_configs(fed, "aggregator", ["median"])[0].federated.aggregator.kind == AggregatorKind.MEDIAN
    labelled = sweep_configs(fed, "aggregator", [{"kind": "trimmed_mean", "trim_k": 2}])[0]
    assert labelled.name == "tiny/aggregator=trimmed_mean(trim_k=2)"
    assert sweep_configs(cfg, "early_stop", [1])[0].method.jtt.identification_epochs == 1
    combined = replace(cfg, defense=replace(cfg.defense, kind=DefenseKind.EPIC))
    assert sweep_configs(combined, "stop_epoch", [3])[0].combined.stop_epochs == (3,)
    assert run_sweep(cfg, "upsample", []) == []
    with pytest.raises(ConfigurationError):
        sweep_configs(cfg, "learning_rate", [1])
    recs = run_sweep(replace(cfg, repetitions=1), "upsample", [1, 5])
    assert [r.scenario for r in recs] == ["tiny/upsample=1", "tiny/upsample=5"]
    assert recs[0].config_hash != recs[1].config_hash


def test_emit_formats(tmp_path, jtt_record):
    assert emit([], "csv", tmp_path / "empty").read_text() == ",".join(CSV_COLUMNS) + "\n"
    path = emit([jtt_record], "csv", tmp_path / "a")
    rows = list(csv.reader(io.StringIO(path.read_text())))
    assert rows[0] == CSV_COLUMNS and len(rows) == 2
    assert rows[1][0] == "tiny" and rows[1][2] == "2"
    doc = json.loads(emit([jtt_record], "json", tmp_path / "b").read_text())
    assert doc[0]["runs"] == jtt_record.runs
    assert emit([jtt_record], "plot", tmp_path / "c").read_text() == "x,series,y\n"
    with pytest.raises(ConfigurationError):
        emit([], "xml", tmp_path)


def test_csv_columns_fixed():
    assert CSV_COLUMNS[:3] == ["scenario", "config_hash", "n_runs"]
    assert "wall_seconds" not in ",".join(CSV_COLUMNS)


def test_enum_spellings():
    cfg = parse_config({"attack": "GM", "intervention": "Worst"})
    assert cfg.attack.kind == AttackKind.GM and cfg.intervention == Intervention.WORST
