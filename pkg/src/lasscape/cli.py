"""Command-line entry point: ``lasscape run|analyze|report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import io, landscape, stats
from .generators import LlmClient, LlmEndpointConfig, LlmGenerator, MockGenerator
from .search import GeneratorFailure, NoFeasibleCandidate, RunLog, SearchConfig, run_search
from .similarity import pair_table
from .tasks import InvalidParams, TaskSpec

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_GENERATOR = 3
EXIT_SCHEMA = 4
EXIT_DEGENERATE = 5

KDE_POINTS = 201

log = logging.getLogger("lasscape")


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


def load_config(path: str | None) -> dict[str, Any]:
    """Read a JSON run configuration with optional ``task``, ``search``, ``generator`` and ``llm`` blocks."""
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise io.IoError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(data) - {"task", "search", "generator", "llm"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return data


def resolve_run(args: argparse.Namespace) -> tuple[TaskSpec, SearchConfig, str, LlmEndpointConfig | None]:
    cfg = load_config(args.config)
    task_block = dict(cfg.get("task", {}))
    search_block = dict(cfg.get("search", {}))
    llm_block = dict(cfg.get("llm", {}) or {})
    if args.task:
        task_block["kind"] = args.task
    if args.target:
        task_block["target"] = args.target
    if args.seed is not None:
        task_block["seed"] = args.seed
        search_block["master_seed"] = args.seed
    if args.pop_size is not None:
        search_block["pop_size"] = args.pop_size
    if args.budget is not None:
        search_block["budget"] = args.budget
    if args.workers is not None:
        search_block["workers"] = args.workers
    if args.llm_base_url:
        llm_block["base_url"] = args.llm_base_url
    if args.llm_model:
        llm_block["model"] = args.llm_model
    generator = args.generator or cfg.get("generator", "mock")
    if "kind" not in task_block:
        raise UsageError("no task given (use --task or a config file)")
    unknown = set(search_block) - set(SearchConfig.__dataclass_fields__)
    if unknown:
        raise UsageError(f"unknown search settings: {sorted(unknown)}")
    try:
        task = TaskSpec.from_dict(task_block)
        search = SearchConfig.from_dict(search_block)
    except (InvalidParams, ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    endpoint = None
    if generator == "llm":
        if not llm_block.get("base_url") or not llm_block.get("model"):
            raise UsageError("the llm generator needs --llm-base-url and --llm-model")
        try:
            endpoint = LlmEndpointConfig(**llm_block)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid llm settings: {exc}") from exc
    elif generator != "mock":
        raise UsageError(f"unknown generator {generator!r}")
    return task, search, generator, endpoint


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    task, search, generator_name, endpoint = resolve_run(args)
    client = None
    if generator_name == "llm":
        client = LlmClient(endpoint, seed=search.master_seed)
        generator = LlmGenerator(client)
    else:
        generator = MockGenerator(search.init_max_depth)
    try:
        runlog = run_search(search, task, generator)
    finally:
        if client is not None:
            client.close()
    io.write_run_log(runlog, args.out)
    try:
        best = runlog.best()
        print(f"best fitness {best.fitness.value!r}")
        print(f"best id {best.canonical_id}")
    except NoFeasibleCandidate:
        print("no feasible candidate")
    return EXIT_OK


def _load_log(path: str) -> RunLog:
    return io.read_run_log(path)


def distribution_rows(runlog: RunLog, bins: int, with_kde: bool) -> list[tuple[str, float, float | None, float]]:
    """Histogram (and optionally KDE) rows over normalized fitness of feasible events."""
    values = [e.fitness.value for e in runlog.events if e.fitness.feasible]
    z = stats.normalize_fitness(values)
    edges, counts = stats.histogram(z, bins)
    rows: list[tuple[str, float, float | None, float]] = [
        ("hist", edges[i], edges[i + 1], float(c)) for i, c in enumerate(counts)
    ]
    if with_kde:
        h = stats.silverman_bandwidth(z)
        lo, hi = min(z) - 3 * h, max(z) + 3 * h
        grid = [lo + (hi - lo) * i / (KDE_POINTS - 1) for i in range(KDE_POINTS)]
        rows += [("kde", x, None, d) for x, d in zip(grid, stats.kde(z, grid))]
    return rows


DISTRIBUTION_HEADER = ("series", "x0", "x1", "value")
METRICS_HEADER = ("nodes", "edges", "density", "average_degree", "clustering")
BOX_HEADER = ("operator", "field", "count", "median", "q1", "q3", "min", "max")


def metrics_row(g: landscape.LandscapeGraph) -> tuple:
    m = landscape.metrics(g)
    return (g.n, len(g.edges), m.density, m.average_degree, m.clustering)


def correlation_rows(cm: stats.CorrelationMatrix) -> list[list]:
    return [[name, *row] for name, row in zip(cm.fields, cm.values)]


def operator_rows(pairs) -> list[tuple]:
    rows = []
    for op, by_field in stats.operator_summary(pairs).items():
        for name, b in by_field.items():
            rows.append((op, name, b.count, b.median, b.q1, b.q3, b.min, b.max))
    return rows


def summary_text(runlog: RunLog, g: landscape.LandscapeGraph) -> str:
    m = landscape.metrics(g)
    feasible = sum(e.fitness.feasible for e in runlog.events)
    lines = [
        f"task: {runlog.header.get('task', {}).get('kind', '?')}",
        f"events: {len(runlog.events)} ({feasible} feasible)",
        f"distinct candidates: {g.n}",
        f"density: {m.density!r}",
        f"average_degree: {m.average_degree!r}",
        f"clustering: {m.clustering!r}",
    ]
    try:
        best = runlog.best()
        lines += [
            f"best eval_index: {best.eval_index}",
            f"best fitness: {best.fitness.value!r}",
            f"best id: {best.canonical_id}",
            "best program:",
            best.candidate.canonical_text,
        ]
    except NoFeasibleCandidate:
        lines.append("best: none (no feasible candidate)")
    return "\n".join(lines) + "\n"


def cmd_landscape(args) -> int:
    g = landscape.build_graph(_load_log(args.log))
    shown = g.filtered(args.min_edge_weight)
    if args.format == "graphml":
        io.export_graphml(shown, args.out)
    elif args.format == "dot":
        io.export_dot(shown, args.out)
    else:
        coords = landscape.layout(g, args.dims, args.layout_seed, weight_threshold=args.min_edge_weight)
        io.export_graph_json(shown, coords, args.out, landscape.metrics(shown))
    return EXIT_OK


def cmd_metrics(args) -> int:
    g = landscape.build_graph(_load_log(args.log))
    row = metrics_row(g)
    print(f"density {row[2]!r}")
    print(f"average_degree {row[3]!r}")
    print(f"clustering {row[4]!r}")
    if args.csv:
        io.export_csv(METRICS_HEADER, [row], args.csv)
    return EXIT_OK


def cmd_distribution(args) -> int:
    rows = distribution_rows(_load_log(args.log), args.bins, args.kde)
    io.export_csv(DISTRIBUTION_HEADER, rows, args.out)
    return EXIT_OK


def cmd_trajectory(args) -> int:
    io.export_dot(landscape.trajectory(_load_log(args.log)), args.out)
    return EXIT_OK


def cmd_similarity(args) -> int:
    io.write_pair_table(pair_table(_load_log(args.log)), args.out)
    return EXIT_OK


def cmd_correlation(args) -> int:
    pairs = io.read_pair_table(args.pairs)
    cm = stats.correlation_matrix(pairs, signed_delta=args.signed_delta, winsorize_delta=not args.no_winsorize)
    k = len(cm.fields)
    if len(cm.missing) == k * (k - 1) // 2:
        raise stats.DegenerateSample(f"every correlation among {', '.join(cm.fields)} is undefined", metric="pearson")
    for a, b in cm.missing:
        log.warning("correlation %s/%s is undefined (constant or too few rows)", a, b)
    io.export_csv(("metric", *cm.fields), correlation_rows(cm), args.out)
    return EXIT_OK


def cmd_operators(args) -> int:
    io.export_csv(BOX_HEADER, operator_rows(io.read_pair_table(args.pairs)), args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    runlog = _load_log(args.log)
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise io.IoError(f"cannot create {out}: {exc}") from exc
    g = landscape.build_graph(runlog)
    io.export_csv(METRICS_HEADER, [metrics_row(g)], out / "metrics.csv")

    feasible = [e for e in runlog.events if e.fitness.feasible]
    dist: list = []
    if feasible:
        try:
            dist = distribution_rows(runlog, args.bins, with_kde=True)
        except stats.DegenerateSample:
            dist = distribution_rows(runlog, args.bins, with_kde=False)
    io.export_csv(DISTRIBUTION_HEADER, dist, out / "distribution.csv")

    io.export_graphml(g, out / "landscape.graphml")
    io.export_dot(g, out / "landscape.dot")
    io.export_graph_json(g, landscape.layout(g, 2, args.layout_seed), out / "landscape.json", landscape.metrics(g))
    if feasible:
        io.export_dot(landscape.trajectory(runlog), out / "trajectory.dot")
    else:
        io.atomic_write(out / "trajectory.dot", "digraph trajectory {\n}\n")

    pairs = pair_table(runlog)
    io.write_pair_table(pairs, out / "pairs.csv")
    cm = stats.correlation_matrix(pairs)
    io.export_csv(("metric", *cm.fields), correlation_rows(cm), out / "correlation.csv")
    io.export_csv(BOX_HEADER, operator_rows(pairs), out / "operators.csv")
    io.atomic_write(out / "summary.txt", summary_text(runlog, g))
    return EXIT_OK


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def _pos_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lasscape", description="Fitness-landscape analysis of algorithm search runs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a search and write its log")
    run.add_argument("--task", type=str.upper, choices=["OBP", "TSP", "SYMREG"])
    run.add_argument("--target", choices=["logistic", "identity"], help="symbolic-regression target")
    run.add_argument("--generator", choices=["mock", "llm"])
    run.add_argument("--pop-size", type=_pos_int)
    run.add_argument("--budget", type=_pos_int)
    run.add_argument("--seed", type=_nonneg_int)
    run.add_argument("--workers", type=_pos_int)
    run.add_argument("--out", required=True)
    run.add_argument("--config")
    run.add_argument("--llm-base-url")
    run.add_argument("--llm-model")
    run.set_defaults(func=cmd_run)

    analyze = sub.add_parser("analyze", help="derive one artifact from a log or pair table")
    asub = analyze.add_subparsers(dest="analysis", required=True)

    p = asub.add_parser("landscape")
    p.add_argument("log")
    p.add_argument("--format", choices=["graphml", "dot", "json"], default="graphml")
    p.add_argument("--dims", type=int, choices=[2, 3], default=2)
    p.add_argument("--layout-seed", type=_nonneg_int, default=0)
    p.add_argument("--min-edge-weight", type=_nonneg_int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_landscape)

    p = asub.add_parser("metrics")
    p.add_argument("log")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_metrics)

    p = asub.add_parser("distribution")
    p.add_argument("log")
    p.add_argument("--bins", type=_pos_int, default=20)
    p.add_argument("--kde", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distribution)

    p = asub.add_parser("trajectory")
    p.add_argument("log")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trajectory)

    p = asub.add_parser("similarity")
    p.add_argument("log")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_similarity)

    p = asub.add_parser("correlation")
    p.add_argument("pairs")
    p.add_argument("--signed-delta", action="store_true")
    p.add_argument("--no-winsorize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_correlation)

    p = asub.add_parser("operators")
    p.add_argument("pairs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_operators)

    rep = sub.add_parser("report", help="write every artifact for a log into a directory")
    rep.add_argument("log")
    rep.add_argument("out_dir")
    rep.add_argument("--bins", type=_pos_int, default=20)
    rep.add_argument("--layout-seed", type=_nonneg_int, default=0)
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GeneratorFailure as exc:
        print(f"generator failure: {exc}", file=sys.stderr)
        return EXIT_GENERATOR
    except io.SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except landscape.DanglingParent as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (stats.DegenerateSample, stats.EmptyInput, NoFeasibleCandidate) as exc:
        metric = getattr(exc, "metric", None)
        suffix = f" (metric: {metric})" if metric else ""
        print(f"degenerate statistics: {exc}{suffix}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (io.IoError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
