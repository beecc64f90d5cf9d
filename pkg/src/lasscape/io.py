"""Run-log persistence, external-run import, and graph/table exporters."""

from __future__ import annotations

import csv
import io as _io
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Sequence

import networkx as nx

from .landscape import GraphMetrics, LandscapeGraph, NodeInfo, TrajectoryGraph
from .search import EVENT_ARITY, Candidate, GenerationEvent, RunLog, make_candidate
from .similarity import PAIR_FIELDS, SimilarityPair
from .tasks import Fitness, InvalidParams, TaskSpec

SCHEMA_VERSION = "1"
EVENT_FIELDS = (
    "eval_index",
    "code",
    "canonical_code",
    "canonical_id",
    "operator",
    "parent_ids",
    "fitness",
    "feasible",
    "note",
)
HEADER_FIELDS = ("schema_version", "task", "config", "seed", "created_at")

NODE_WIDTH_PER_COUNT = 0.15
PENWIDTH_PER_WEIGHT = 1.0


class IoError(OSError):
    pass


class SchemaError(ValueError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = f"line {line}: " if line is not None else ""
        what = f" [{field}]" if field else ""
        super().__init__(f"{where}{message}{what}")
        self.line = line
        self.field = field


# --------------------------------------------------------------------------
# Atomic writes
# --------------------------------------------------------------------------


def atomic_write(path: str | os.PathLike, data: str | bytes) -> None:
    """Write ``data`` to a sibling temp file, then rename it over ``path``."""
    target = Path(path)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    tmp = None
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, target)
        tmp = None
    except OSError as exc:
        raise IoError(f"cannot write {target}: {exc}") from exc
    finally:
        if tmp is not None and os.path.exists(tmp):
            os.unlink(tmp)


def _read_text(path: str | os.PathLike) -> str:
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            return fh.read()
    except (OSError, UnicodeDecodeError) as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


# --------------------------------------------------------------------------
# Run logs
# --------------------------------------------------------------------------


def event_record(ev: GenerationEvent) -> dict[str, Any]:
    return {
        "eval_index": ev.eval_index,
        "code": ev.candidate.code,
        "canonical_code": ev.candidate.canonical_text,
        "canonical_id": ev.candidate.canonical_id,
        "operator": ev.operator,
        "parent_ids": list(ev.parent_ids),
        "fitness": ev.fitness.value if ev.fitness.feasible else None,
        "feasible": ev.fitness.feasible,
        "note": ev.note,
    }


def _dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, allow_nan=False)


def dumps_run_log(log: RunLog) -> str:
    lines = [_dumps(log.header)] + [_dumps(event_record(ev)) for ev in log.events]
    return "\n".join(lines) + "\n"


def write_run_log(log: RunLog, path: str | os.PathLike) -> None:
    atomic_write(path, dumps_run_log(log))


def _records(text: str) -> list[tuple[int, dict[str, Any]]]:
    out = []
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"malformed record: {exc.msg}", lineno) from exc
        if not isinstance(obj, dict):
            raise SchemaError("record is not an object", lineno)
        out.append((lineno, obj))
    if not out:
        raise SchemaError("empty run log", 1)
    return out


def _require(rec: dict, name: str, line: int, types: type | tuple[type, ...], nullable: bool = False):
    if name not in rec:
        raise SchemaError(f"missing field {name!r}", line, name)
    value = rec[name]
    if value is None and nullable:
        return None
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise SchemaError(f"field {name!r} has the wrong type", line, name)
    if not isinstance(value, types):
        raise SchemaError(f"field {name!r} has the wrong type", line, name)
    return value


def _parse_header(rec: dict, line: int, strict: bool) -> dict[str, Any]:
    if strict:
        for name in HEADER_FIELDS:
            if name not in rec:
                raise SchemaError(f"missing header field {name!r}", line, name)
        if rec["schema_version"] != SCHEMA_VERSION:
            raise SchemaError(f"unsupported schema_version {rec['schema_version']!r}", line, "schema_version")
    return dict(rec)


def _parse_fitness(rec: dict, line: int) -> Fitness:
    feasible = _require(rec, "feasible", line, bool)
    value = _require(rec, "fitness", line, (int, float), nullable=True)
    if feasible:
        if value is None or not math.isfinite(value):
            raise SchemaError("feasible event needs a finite fitness", line, "fitness")
        return Fitness(float(value), True)
    if value is not None:
        raise SchemaError("infeasible event must have null fitness", line, "fitness")
    return Fitness.infeasible()


def _check_event(ev: GenerationEvent, line: int, expected_index: int, seen: set[str]) -> None:
    if ev.eval_index != expected_index:
        raise SchemaError(
            f"eval_index {ev.eval_index} breaks the contiguous sequence (expected {expected_index})",
            line,
            "eval_index",
        )
    if ev.operator not in EVENT_ARITY:
        raise SchemaError(f"unknown operator {ev.operator!r}", line, "operator")
    lo, hi = EVENT_ARITY[ev.operator]
    if not lo <= len(ev.parent_ids) <= hi:
        raise SchemaError(f"{ev.operator} cannot have {len(ev.parent_ids)} parents", line, "parent_ids")
    for pid in ev.parent_ids:
        if pid not in seen:
            raise SchemaError(f"unknown parent id {pid}", line, "parent_ids")


def _task_of(header: dict[str, Any], line: int) -> TaskSpec:
    try:
        return TaskSpec.from_dict(header["task"])
    except (KeyError, TypeError, ValueError, InvalidParams) as exc:
        raise SchemaError(f"invalid task block: {exc}", line, "task") from exc


def read_run_log(path: str | os.PathLike) -> RunLog:
    """Load a log written by :func:`write_run_log`, validating every event."""
    records = _records(_read_text(path))
    hline, hrec = records[0]
    header = _parse_header(hrec, hline, strict=True)
    inputs = _task_of(header, hline).input_vars
    log = RunLog(header)
    seen: set[str] = set()
    for line, rec in records[1:]:
        index = _require(rec, "eval_index", line, int)
        code = _require(rec, "code", line, str)
        canonical_code = _require(rec, "canonical_code", line, str)
        canonical_id = _require(rec, "canonical_id", line, str)
        operator = _require(rec, "operator", line, str)
        parents = _require(rec, "parent_ids", line, list)
        if not all(isinstance(p, str) for p in parents):
            raise SchemaError("parent ids must be strings", line, "parent_ids")
        fitness = _parse_fitness(rec, line)
        note = _require(rec, "note", line, str, nullable=True)
        cand = make_candidate(code, inputs)
        if cand.canonical_id != canonical_id:
            raise SchemaError("canonical_id does not match the code", line, "canonical_id")
        if cand.canonical_text != canonical_code:
            raise SchemaError("canonical_code does not match the code", line, "canonical_code")
        ev = GenerationEvent(index, cand, operator, tuple(parents), fitness, note)
        _check_event(ev, line, len(log.events), seen)
        log.events.append(ev)
        seen.add(canonical_id)
    return log


def import_external(
    path: str | os.PathLike,
    task: TaskSpec | None = None,
    relabel_unknown: bool = True,
) -> RunLog:
    """Load a run produced by another LAS framework.

    Records follow the run-log schema, but ``code`` may be any text and
    ``canonical_code``/``canonical_id`` may be absent.  Every candidate is
    re-canonicalized: DSL code the usual way, anything else by hashing its
    whitespace-normalized text.  Parent ids are translated from the ids used
    in the file.  Unknown operator labels become ``IMPORT`` (the original
    label is kept in ``note``) unless ``relabel_unknown`` is false.
    """
    records = _records(_read_text(path))
    hline, hrec = records[0]
    header = _parse_header(hrec, hline, strict=False)
    if task is None:
        task = _task_of(header, hline) if "task" in header else None
    if task is None:
        raise SchemaError("no task in header and none given", hline, "task")
    header["task"] = task.to_dict()
    header.setdefault("schema_version", SCHEMA_VERSION)
    header["imported_from"] = os.fspath(path)
    inputs = task.input_vars

    log = RunLog(header)
    id_map: dict[str, str] = {}
    seen: set[str] = set()
    for line, rec in records[1:]:
        index = _require(rec, "eval_index", line, int)
        code = _require(rec, "code", line, str)
        operator = _require(rec, "operator", line, str)
        parents = _require(rec, "parent_ids", line, list)
        fitness = _parse_fitness(rec, line)
        note = rec.get("note")
        if note is not None and not isinstance(note, str):
            raise SchemaError("note must be text or null", line, "note")
        cand: Candidate = make_candidate(code, inputs)
        if operator not in EVENT_ARITY and relabel_unknown:
            note = f"operator={operator}" + (f"; {note}" if note else "")
            operator = "IMPORT"
        try:
            mapped = tuple(id_map[str(p)] for p in parents)
        except KeyError as exc:
            raise SchemaError(f"unknown parent id {exc.args[0]}", line, "parent_ids") from None
        ev = GenerationEvent(index, cand, operator, mapped, fitness, note)
        _check_event(ev, line, len(log.events), seen)
        log.events.append(ev)
        seen.add(cand.canonical_id)
        external_id = rec.get("canonical_id")
        id_map[str(external_id) if external_id is not None else cand.canonical_id] = cand.canonical_id
        id_map.setdefault(cand.canonical_id, cand.canonical_id)
    return log


# --------------------------------------------------------------------------
# Graph exports
# --------------------------------------------------------------------------


def _finite_or_none(x: float) -> float | None:
    return x if math.isfinite(x) else None


def _trajectory_nx(t: TrajectoryGraph) -> nx.DiGraph:
    g = nx.DiGraph()
    for k in sorted(t.nodes):
        info = t.nodes[k]
        g.add_node(k, fitness=info.fitness, count=info.count, feasible=info.feasible, level=t.levels[k])
    for a, b in t.edges:
        g.add_edge(a, b)
    return g


def graphml_text(g: LandscapeGraph | TrajectoryGraph) -> str:
    graph = _trajectory_nx(g) if isinstance(g, TrajectoryGraph) else g.to_networkx()
    return "\n".join(nx.generate_graphml(graph)) + "\n"


def export_graphml(g: LandscapeGraph | TrajectoryGraph, path: str | os.PathLike) -> None:
    atomic_write(path, graphml_text(g))


def _gray(z: float) -> str:
    level = int(round(255 * min(max(z, 0.0), 1.0)))
    return f"#{level:02x}{level:02x}{level:02x}"


def _num(x: float) -> str:
    return repr(float(x))


def _dot_node(cid: str, info: NodeInfo, z: float, extra: str = "") -> str:
    fitness = _num(info.fitness) if info.feasible else "infeasible"
    width = NODE_WIDTH_PER_COUNT * info.count
    return (
        f'  "{cid}" [label="{cid[:8]}", tooltip="{fitness}", style=filled, '
        f'fillcolor="{_gray(z)}", width={_num(width)}{extra}];'
    )


def _zscale(nodes: dict[str, NodeInfo]) -> dict[str, float]:
    return LandscapeGraph(nodes, {}).normalized_fitness()


def dot_text(g: LandscapeGraph | TrajectoryGraph) -> str:
    """Graphviz source: fill gray = normalized fitness (black is best), width ~ count."""
    z = _zscale(g.nodes)
    if isinstance(g, TrajectoryGraph):
        lines = ["digraph trajectory {", "  rankdir=TB;", "  node [shape=circle, fixedsize=true];"]
        for cid in sorted(g.nodes):
            lines.append(_dot_node(cid, g.nodes[cid], z[cid]))
        by_level: dict[int, list[str]] = {}
        for cid, lvl in g.levels.items():
            by_level.setdefault(lvl, []).append(cid)
        for lvl in sorted(by_level, reverse=True):
            members = " ".join(f'"{c}";' for c in sorted(by_level[lvl]))
            lines.append(f"  {{ rank=same; {members} }}")
        for a, b in g.edges:
            lines.append(f'  "{a}" -> "{b}";')
        lines.append("}")
        return "\n".join(lines) + "\n"
    lines = ["graph landscape {", "  node [shape=circle, fixedsize=true];"]
    for cid in sorted(g.nodes):
        lines.append(_dot_node(cid, g.nodes[cid], z[cid]))
    for (a, b), w in sorted(g.edges.items()):
        lines.append(f'  "{a}" -- "{b}" [weight={w}, penwidth={_num(PENWIDTH_PER_WEIGHT * w)}];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_dot(g: LandscapeGraph | TrajectoryGraph, path: str | os.PathLike) -> None:
    atomic_write(path, dot_text(g))


def graph_json(
    g: LandscapeGraph,
    coords: dict[str, tuple[float, ...]] | None = None,
    metrics: GraphMetrics | None = None,
) -> dict[str, Any]:
    z = g.normalized_fitness()
    nodes = []
    for cid in sorted(g.nodes):
        info = g.nodes[cid]
        node = {
            "id": cid,
            "text": info.text,
            "fitness": _finite_or_none(info.fitness),
            "normalized_fitness": z[cid],
            "count": info.count,
            "feasible": info.feasible,
            "first_index": info.first_index,
        }
        if coords is not None:
            node["pos"] = list(coords[cid])
        nodes.append(node)
    edges = [{"source": a, "target": b, "weight": w} for (a, b), w in sorted(g.edges.items())]
    out: dict[str, Any] = {"nodes": nodes, "edges": edges}
    if metrics is not None:
        out["metrics"] = {
            "density": metrics.density,
            "average_degree": metrics.average_degree,
            "clustering": metrics.clustering,
        }
    return out


def export_graph_json(
    g: LandscapeGraph,
    coords: dict[str, tuple[float, ...]] | None,
    path: str | os.PathLike,
    metrics: GraphMetrics | None = None,
) -> None:
    atomic_write(path, json.dumps(graph_json(g, coords, metrics), indent=1, allow_nan=False) + "\n")


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------


def _cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def export_csv(header: Sequence[str], rows: Iterable[Sequence[Any]], path: str | os.PathLike) -> None:
    atomic_write(path, csv_text(header, rows))


def read_csv(path: str | os.PathLike) -> tuple[list[str], list[list[str]]]:
    rows = list(csv.reader(_io.StringIO(_read_text(path))))
    if not rows:
        raise SchemaError("empty CSV file", 1)
    return rows[0], rows[1:]


def write_pair_table(pairs: Sequence[SimilarityPair], path: str | os.PathLike) -> None:
    export_csv(PAIR_FIELDS, ([getattr(p, f) for f in PAIR_FIELDS] for p in pairs), path)


_PAIR_TYPES = {"eval_index": int, "operator": str, "parent_id": str, "offspring_id": str}


def read_pair_table(path: str | os.PathLike) -> list[SimilarityPair]:
    header, rows = read_csv(path)
    missing = [f for f in PAIR_FIELDS if f not in header]
    if missing:
        raise SchemaError(f"pair table lacks column {missing[0]!r}", 1, missing[0])
    pos = {name: header.index(name) for name in PAIR_FIELDS}
    out = []
    for lineno, row in enumerate(rows, 2):
        if len(row) != len(header):
            raise SchemaError(f"expected {len(header)} cells, got {len(row)}", lineno)
        values: dict[str, Any] = {}
        for name in PAIR_FIELDS:
            raw = row[pos[name]]
            kind = _PAIR_TYPES.get(name, float)
            if raw == "":
                if name in ("ast_match", "dataflow_match"):
                    values[name] = None
                    continue
                raise SchemaError(f"empty cell in column {name!r}", lineno, name)
            try:
                values[name] = kind(raw)
            except ValueError as exc:
                raise SchemaError(f"bad value {raw!r}", lineno, name) from exc
        out.append(SimilarityPair(**values))
    return out
