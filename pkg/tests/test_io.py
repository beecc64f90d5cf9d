from __future__ import annotations

import json
import math
import os
import xml.etree.ElementTree as ET

import pytest

from lasscape.io import (
    IoError,
    SchemaError,
    atomic_write,
    csv_text,
    dot_text,
    dumps_run_log,
    export_graph_json,
    export_graphml,
    graph_json,
    graphml_text,
    import_external,
    read_csv,
    read_pair_table,
    read_run_log,
    write_pair_table,
    write_run_log,
)
from lasscape.landscape import LandscapeGraph, NodeInfo, build_graph, layout, metrics, trajectory
from lasscape.search import SearchConfig, run_search
from lasscape.similarity import pair_table
from lasscape.tasks import TaskSpec

GRAPHML = "{http://graphml.graphdrawing.org/xmlns}"


@pytest.fixture(scope="module")
def log():
    return run_search(SearchConfig(pop_size=4, budget=30, master_seed=1), TaskSpec("OBP", {"n_instances": 2}), created_at="t")


def lines_of(log):
    return dumps_run_log(log).splitlines()


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------- run logs


def test_round_trip(tmp_path, log):
    path = tmp_path / "run.jsonl"
    write_run_log(log, path)
    back = read_run_log(path)
    assert back.header == log.header
    assert back.events == log.events
    assert dumps_run_log(back) == path.read_text()


def test_infeasible_fitness_written_as_null(tmp_path):
    def bad(op, parents, rng, task):
        return "return pow(exp(x * 50), exp(x * 50))", None

    log = run_search(SearchConfig(pop_size=2, budget=3), TaskSpec("SYMREG"), bad, created_at="t")
    rec = json.loads(lines_of(log)[3])
    assert rec["fitness"] is None and rec["feasible"] is False
    path = write_lines(tmp_path / "r.jsonl", lines_of(log))
    assert math.isinf(read_run_log(path).events[2].fitness.value)


def test_unknown_parent_reports_line(tmp_path, log):
    lines = lines_of(log)
    rec = json.loads(lines[6])
    rec["parent_ids"] = ["0" * 64] * len(rec["parent_ids"]) or ["0" * 64]
    if rec["operator"] == "INIT":
        rec["operator"] = "M1"
    lines[6] = json.dumps(rec)
    with pytest.raises(SchemaError) as info:
        read_run_log(write_lines(tmp_path / "r.jsonl", lines))
    assert info.value.line == 7 and info.value.field == "parent_ids"


def test_missing_fitness_field(tmp_path, log):
    lines = lines_of(log)
    rec = json.loads(lines[2])
    del rec["fitness"]
    lines[2] = json.dumps(rec)
    with pytest.raises(SchemaError) as info:
        read_run_log(write_lines(tmp_path / "r.jsonl", lines))
    assert info.value.field == "fitness" and info.value.line == 3
    assert str(info.value).startswith("line 3:")


def test_duplicate_eval_index(tmp_path, log):
    lines = lines_of(log)
    lines.insert(3, lines[2])
    with pytest.raises(SchemaError) as info:
        read_run_log(write_lines(tmp_path / "r.jsonl", lines))
    assert info.value.field == "eval_index" and info.value.line == 4


@pytest.mark.parametrize(
    "mutate,field",
    [
        (lambda r: r.update(canonical_id="f" * 64), "canonical_id"),
        (lambda r: r.update(operator="X9"), "operator"),
        (lambda r: r.update(fitness="1.0"), "fitness"),
        (lambda r: r.update(feasible=False), "fitness"),
    ],
)
def test_field_violations(tmp_path, log, mutate, field):
    lines = lines_of(log)
    rec = json.loads(lines[1])
    mutate(rec)
    lines[1] = json.dumps(rec)
    with pytest.raises(SchemaError) as info:
        read_run_log(write_lines(tmp_path / "r.jsonl", lines))
    assert info.value.field == field and info.value.line == 2


def test_header_checks(tmp_path, log):
    lines = lines_of(log)
    head = json.loads(lines[0])
    head["schema_version"] = "9"
    with pytest.raises(SchemaError):
        read_run_log(write_lines(tmp_path / "a.jsonl", [json.dumps(head)] + lines[1:]))
    with pytest.raises(SchemaError) as info:
        read_run_log(write_lines(tmp_path / "b.jsonl", ["{not json"] + lines[1:]))
    assert info.value.line == 1


def test_missing_file():
    with pytest.raises(IoError):
        read_run_log("/nonexistent/run.jsonl")


# ---------------------------------------------------------------- import


def test_foreign_import(tmp_path):
    rows = [
        {"task": {"kind": "OBP"}, "framework": "other"},
        {"eval_index": 0, "code": "def score(item, bins):\n    return bins - item", "canonical_id": "A",
         "operator": "i1", "parent_ids": [], "fitness": 2.0, "feasible": True},
        {"eval_index": 1, "code": "return   item-cap", "canonical_id": "B",
         "operator": "M1", "parent_ids": ["A"], "fitness": 1.5, "feasible": True},
    ]
    path = write_lines(tmp_path / "ext.jsonl", [json.dumps(r) for r in rows])
    log = import_external(path)
    a, b = log.events
    assert a.candidate.foreign and a.operator == "IMPORT" and a.note == "operator=i1"
    assert not b.candidate.foreign and b.candidate.canonical_text == "return item - cap"
    assert b.parent_ids == (a.canonical_id,)
    assert log.header["imported_from"] == os.fspath(path)
    assert build_graph(log).n == 2


def test_import_of_own_log_is_identity(tmp_path, log):
    path = tmp_path / "run.jsonl"
    write_run_log(log, path)
    assert import_external(path).events == log.events


# ---------------------------------------------------------------- graph exports


def two_node_graph():
    g = LandscapeGraph()
    g.nodes["a"] = NodeInfo("return item", 1.0, 1, True, 0)
    g.nodes["b"] = NodeInfo("return cap", 2.0, 3, True, 1)
    g.edges[("a", "b")] = 2
    return g


def test_graphml_counts():
    root = ET.fromstring(graphml_text(two_node_graph()))
    assert len(root.findall(f".//{GRAPHML}node")) == 2
    assert len(root.findall(f".//{GRAPHML}edge")) == 1
    keys = {k.get("attr.name") for k in root.findall(f"{GRAPHML}key")}
    assert {"fitness", "count", "feasible", "weight"} <= keys


def test_dot_direction(log):
    assert "--" in dot_text(two_node_graph()) and "->" not in dot_text(two_node_graph())
    t = dot_text(trajectory(log))
    assert t.startswith("digraph") and "rank=same" in t
    if trajectory(log).edges:
        assert "->" in t


def test_dot_encodings():
    text = dot_text(two_node_graph())
    assert 'fillcolor="#000000"' in text and 'fillcolor="#ffffff"' in text
    assert "width=0.15" in text and "penwidth=2.0" in text


def test_graph_json(tmp_path):
    g = two_node_graph()
    coords = layout(g, seed=1)
    path = tmp_path / "g.json"
    export_graph_json(g, coords, path, metrics(g))
    data = json.loads(path.read_text())
    assert data == json.loads(json.dumps(graph_json(g, coords, metrics(g))))
    assert [n["id"] for n in data["nodes"]] == ["a", "b"]
    assert data["edges"] == [{"source": "a", "target": "b", "weight": 2}]
    assert data["metrics"]["density"] == 1.0


def test_exports_byte_identical(tmp_path, log):
    g = build_graph(log)
    export_graphml(g, tmp_path / "a.graphml")
    export_graphml(g, tmp_path / "b.graphml")
    assert (tmp_path / "a.graphml").read_bytes() == (tmp_path / "b.graphml").read_bytes()
    assert dot_text(g) == dot_text(build_graph(log))


# ---------------------------------------------------------------- CSV


def test_csv_format():
    text = csv_text(["a", "b", "c", "d"], [[1, 0.1, None, True], ["x,y", 2.5, "", False]])
    assert text == 'a,b,c,d\n1,0.1,,true\n"x,y",2.5,,false\n'
    assert "\r" not in text


def test_pair_table_round_trip(tmp_path, log):
    rows = pair_table(log)
    assert rows
    path = tmp_path / "pairs.csv"
    write_pair_table(rows, path)
    assert read_pair_table(path) == rows
    header, body = read_csv(path)
    assert header[0] == "eval_index" and len(body) == len(rows)


def test_pair_table_schema_errors(tmp_path):
    (tmp_path / "p.csv").write_text("eval_index,operator\n1,M1\n")
    with pytest.raises(SchemaError):
        read_pair_table(tmp_path / "p.csv")


# ---------------------------------------------------------------- atomic writes


def test_atomic_write_replaces_and_cleans(tmp_path):
    target = tmp_path / "sub" / "out.txt"
    atomic_write(target, "one")
    atomic_write(target, "two")
    assert target.read_text() == "two"
    assert os.listdir(target.parent) == ["out.txt"]


def test_atomic_write_failure_keeps_old(tmp_path, monkeypatch):
    target = tmp_path / "out.txt"
    target.write_text("old")

    def refuse(src, dst):
        raise PermissionError("read-only")

    monkeypatch.setattr(os, "replace", refuse)
    with pytest.raises(IoError):
        atomic_write(target, "new")
    assert target.read_text() == "old"
    assert os.listdir(tmp_path) == ["out.txt"]
