"""The LLM-assisted algorithm search loop and its run log."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__, dsl
from .dsl import DslError, Program
from .generators import ARITY, OPERATORS, MockGenerator
from .tasks import Evaluator, Fitness, TaskSpec

log = logging.getLogger(__name__)

PARENT_COUNT = {"E1": 5, "E2": 2, "M1": 1, "M2": 1}
EVENT_ARITY = {"INIT": (0, 0), "IMPORT": (0, 5), **ARITY}


class GeneratorFailure(RuntimeError):
    pass


class EmptyPopulation(ValueError):
    pass


class NoFeasibleCandidate(ValueError):
    pass


@dataclass(frozen=True)
class Candidate:
    code: str
    canonical_text: str
    canonical_id: str
    program: Program | None = field(default=None, compare=False, repr=False)

    @property
    def foreign(self) -> bool:
        return self.program is None


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


def foreign_candidate(code: str) -> Candidate:
    text = normalize_whitespace(code)
    return Candidate(code, text, dsl.sha256_hex(text), None)


def make_candidate(code: str, input_vars: Sequence[str]) -> Candidate:
    """Parse ``code`` as DSL; non-DSL text becomes an opaque foreign candidate."""
    try:
        program = dsl.parse(code, input_vars)
    except DslError:
        return foreign_candidate(code)
    cf = dsl.canonicalize(program)
    return Candidate(code, cf.text, cf.id, dsl.normalize_names(program))


@dataclass(frozen=True)
class GenerationEvent:
    eval_index: int
    candidate: Candidate
    operator: str
    parent_ids: tuple[str, ...]
    fitness: Fitness
    note: str | None = None

    @property
    def canonical_id(self) -> str:
        return self.candidate.canonical_id


@dataclass
class RunLog:
    header: dict[str, Any]
    events: list[GenerationEvent] = field(default_factory=list)

    def best(self) -> GenerationEvent:
        feasible = [e for e in self.events if e.fitness.feasible]
        if not feasible:
            raise NoFeasibleCandidate("log has no feasible candidate")
        return min(feasible, key=lambda e: (e.fitness.value, e.eval_index))

    @property
    def task(self) -> TaskSpec | None:
        data = self.header.get("task")
        return TaskSpec.from_dict(data) if data else None


@dataclass
class SearchConfig:
    pop_size: int = 20
    budget: int = 2000
    master_seed: int = 0
    schedule: tuple[str, ...] = OPERATORS
    parents_per_operator: dict[str, int] = field(default_factory=lambda: dict(PARENT_COUNT))
    init_retries: int = 10
    init_max_depth: int = 4
    workers: int = 1
    max_generator_failures: int = 20

    def __post_init__(self):
        self.schedule = tuple(self.schedule)
        if self.pop_size < 1:
            raise ValueError("pop_size must be >= 1")
        if self.budget < self.pop_size:
            raise ValueError("budget must be >= pop_size")
        if not self.schedule or any(op not in OPERATORS for op in self.schedule):
            raise ValueError(f"schedule must be drawn from {OPERATORS}")
        for op, k in self.parents_per_operator.items():
            lo, hi = ARITY[op]
            if not lo <= k <= hi or k < 1:
                raise ValueError(f"{op} cannot take {k} parents")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["schedule"] = list(self.schedule)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SearchConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def event_rng(master_seed: int, eval_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(eval_index)]))


def rank_weights(n: int) -> np.ndarray:
    ranks = np.arange(1, n + 1)
    return 1.0 / (ranks + n)


def _ordered(population: Sequence[GenerationEvent]) -> list[GenerationEvent]:
    return sorted(population, key=lambda e: (e.fitness.value, e.eval_index))


def select_parents(population: Sequence[GenerationEvent], k: int, rng: np.random.Generator) -> list[GenerationEvent]:
    """Rank-proportional sampling (weight 1/(rank + n), best rank 1).

    Draws without replacement; once the population is exhausted the remaining
    parents are drawn with replacement.
    """
    if not population:
        raise EmptyPopulation("cannot select parents from an empty population")
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = _ordered(population)
    weights = rank_weights(len(ranked))
    available = list(range(len(ranked)))
    chosen: list[int] = []
    for _ in range(min(k, len(ranked))):
        w = weights[available]
        pick = int(np.searchsorted(np.cumsum(w), rng.random() * w.sum(), side="right"))
        pick = min(pick, len(available) - 1)
        chosen.append(available.pop(pick))
    cdf = np.cumsum(weights)
    for _ in range(k - len(chosen)):
        pick = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        chosen.append(min(pick, len(ranked) - 1))
    return [ranked[i] for i in chosen]


def update_population(
    population: Sequence[GenerationEvent], offspring: Sequence[GenerationEvent], pop_size: int
) -> list[GenerationEvent]:
    """Elitist merge: drop infeasible, dedupe by canonical id (earliest wins), keep the best ``pop_size``."""
    seen: dict[str, GenerationEvent] = {}
    for ev in sorted(list(population) + list(offspring), key=lambda e: e.eval_index):
        if not ev.fitness.feasible:
            continue
        seen.setdefault(ev.canonical_id, ev)
    merged = _ordered(seen.values())[:pop_size]
    return merged if merged else list(population)


Generator = Callable[..., tuple[str, "str | None"]]


class _Scorer:
    """Fitness cache keyed by canonical id (evaluation is deterministic)."""

    def __init__(self, task: TaskSpec):
        self.evaluator = Evaluator(task)
        self.cache: dict[str, Fitness] = {}

    def __call__(self, cand: Candidate) -> Fitness:
        if cand.program is None:
            return Fitness.infeasible()
        hit = self.cache.get(cand.canonical_id)
        if hit is None:
            hit = self.evaluator(cand.program)
            self.cache[cand.canonical_id] = hit
        return hit


def run_search(
    config: SearchConfig,
    task: TaskSpec,
    generator: Generator | None = None,
    created_at: str | None = None,
) -> RunLog:
    """Run the search loop until ``config.budget`` events are logged."""
    generator = generator or MockGenerator(config.init_max_depth)
    header = {
        "schema_version": "1",
        "task": task.to_dict(),
        "config": config.to_dict(),
        "seed": int(config.master_seed),
        "generator": getattr(generator, "name", type(generator).__name__),
        "toolkit_version": __version__,
        "created_at": created_at or datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    runlog = RunLog(header)
    score = _Scorer(task)
    inputs = task.input_vars

    for i in range(config.pop_size):
        rng = event_rng(config.master_seed, i)
        for _ in range(config.init_retries + 1):
            program = dsl.random_program(rng, inputs, config.init_max_depth)
            cand = make_candidate(dsl.serialize(program), inputs)
            fit = score(cand)
            if fit.feasible:
                break
        runlog.events.append(GenerationEvent(i, cand, "INIT", (), fit))
    population = update_population([], runlog.events, config.pop_size)

    def produce(job):
        idx, op, parents, rng = job
        try:
            code, note = generator(op, [p.candidate for p in parents], rng, task)
        except Exception as exc:  # noqa: BLE001 - any generator failure is retried by the loop
            log.warning("generator failed for %s at eval %d: %s", op, idx, exc)
            return None
        cand = make_candidate(code, inputs)
        return GenerationEvent(idx, cand, op, tuple(p.canonical_id for p in parents), score(cand), note)

    failures = 0
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        while len(runlog.events) < config.budget:
            jobs = []
            for op in config.schedule:
                idx = len(runlog.events) + len(jobs)
                if idx >= config.budget:
                    break
                rng = event_rng(config.master_seed, idx)
                if population:
                    parents = select_parents(population, config.parents_per_operator[op], rng)
                else:
                    op, parents = "E1", []
                jobs.append((idx, op, parents, rng))
            results = list(pool.map(produce, jobs)) if pool else [produce(j) for j in jobs]
            offspring = []
            for res in results:
                if res is None:
                    failures += 1
                    if failures > config.max_generator_failures:
                        raise GeneratorFailure(f"generator failed {failures} times")
                    break
                failures = 0
                runlog.events.append(res)
                offspring.append(res)
            population = update_population(population, offspring, config.pop_size)
    finally:
        if pool:
            pool.shutdown()
    return runlog


def best_fitness_trace(runlog: RunLog) -> list[float]:
    """Running minimum of feasible fitness, one entry per event."""
    best, out = math.inf, []
    for ev in runlog.events:
        if ev.fitness.feasible:
            best = min(best, ev.fitness.value)
        out.append(best)
    return out
