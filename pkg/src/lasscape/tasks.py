"""Algorithm-design tasks, seeded instance sets and candidate fitness.

Three tasks are provided.  In each one a DSL program plays the role of a
scoring function inside a fixed constructive procedure:

* ``OBP`` - online bin packing; the program scores every open bin that can
  take the incoming item (inputs ``item``, ``cap``), highest score wins.
* ``TSP`` - constructive tour building; the program scores each unvisited
  city from the current one (inputs ``d_cm``, ``d_md``, ``n_u``, ``avg_md``),
  lowest score wins.
* ``SYMREG`` - the program is the model ``y = f(x)`` itself.

Fitness is the mean per-instance score, lower is better.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .dsl import NonFiniteResult, Program, compile_program, variables

INPUT_VARS: dict[str, tuple[str, ...]] = {
    "OBP": ("item", "cap"),
    "TSP": ("d_cm", "d_md", "n_u", "avg_md"),
    "SYMREG": ("x",),
}

DEFAULT_PARAMS: dict[str, dict[str, float]] = {
    "OBP": {"n_instances": 5, "n_items": 50, "item_min": 20, "item_max": 100, "capacity": 150},
    "TSP": {"n_instances": 5, "n_cities": 50},
    "SYMREG": {"n_instances": 5, "n_samples": 100, "x_max": 10.0},
}

SYMREG_TARGETS = {
    "logistic": lambda x: 2.5 / (1.0 + np.exp(-1.3 * (x - 4.0))),
    "identity": lambda x: np.array(x, dtype=np.float64),
}


class InvalidParams(ValueError):
    pass


class SignatureMismatch(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    params: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    target: str = "logistic"

    def __post_init__(self):
        kind = self.kind.upper()
        if kind not in INPUT_VARS:
            raise InvalidParams(f"unknown task kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        merged = dict(DEFAULT_PARAMS[kind])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise InvalidParams(f"unknown parameters for {kind}: {sorted(unknown)}")
        merged.update(self.params)
        for name, value in merged.items():
            if not value > 0:
                raise InvalidParams(f"parameter {name} must be strictly positive, got {value}")
        object.__setattr__(self, "params", merged)
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidParams("seed must be a 64-bit unsigned integer")
        if kind == "SYMREG" and self.target not in SYMREG_TARGETS:
            raise InvalidParams(f"unknown symbolic-regression target {self.target!r}")
        if kind == "OBP" and merged["item_max"] > merged["capacity"]:
            raise InvalidParams("item_max must not exceed capacity")
        if kind == "OBP" and merged["item_min"] > merged["item_max"]:
            raise InvalidParams("item_min must not exceed item_max")

    @property
    def input_vars(self) -> tuple[str, ...]:
        return INPUT_VARS[self.kind]

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind, "params": dict(self.params), "seed": int(self.seed)}
        if self.kind == "SYMREG":
            out["target"] = self.target
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TaskSpec":
        return cls(
            kind=data["kind"],
            params=dict(data.get("params", {})),
            seed=int(data.get("seed", 0)),
            target=data.get("target", "logistic"),
        )


@dataclass(frozen=True)
class ObpInstance:
    items: tuple[float, ...]
    capacity: float


@dataclass(frozen=True, eq=False)
class TspInstance:
    coords: np.ndarray
    dist: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, TspInstance)
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.dist, other.dist)
        )

    @classmethod
    def from_coords(cls, coords) -> "TspInstance":
        coords = np.array(coords, dtype=np.float64)
        diff = coords[:, None, :] - coords[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=-1))
        dist = (dist + dist.T) / 2.0
        np.fill_diagonal(dist, 0.0)
        coords.setflags(write=False)
        dist.setflags(write=False)
        return cls(coords, dist)


@dataclass(frozen=True, eq=False)
class SymregInstance:
    x: np.ndarray
    y: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, SymregInstance)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
        )


TaskInstance = ObpInstance | TspInstance | SymregInstance


@dataclass(frozen=True)
class Fitness:
    value: float
    feasible: bool

    @classmethod
    def infeasible(cls) -> "Fitness":
        return cls(math.inf, False)


def _instance_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), index]))


def make_instances(spec: TaskSpec) -> list[TaskInstance]:
    p = spec.params
    out: list[TaskInstance] = []
    for i in range(int(p["n_instances"])):
        rng = _instance_rng(spec.seed, i)
        if spec.kind == "OBP":
            items = rng.integers(int(p["item_min"]), int(p["item_max"]) + 1, size=int(p["n_items"]))
            out.append(ObpInstance(tuple(float(v) for v in items), float(p["capacity"])))
        elif spec.kind == "TSP":
            out.append(TspInstance.from_coords(rng.random((int(p["n_cities"]), 2))))
        else:
            n = int(p["n_samples"])
            while True:
                x = np.sort(rng.uniform(0.0, float(p["x_max"]), size=n))
                if np.all(np.diff(x) > 0):
                    break
            y = SYMREG_TARGETS[spec.target](x)
            x.setflags(write=False)
            y.setflags(write=False)
            out.append(SymregInstance(x, y))
    return out


def _lockstep_groups(instances: Sequence[TaskInstance], size) -> list[list[int]]:
    groups: dict[int, list[int]] = {}
    for i, inst in enumerate(instances):
        groups.setdefault(size(inst), []).append(i)
    return list(groups.values())


def pack_bins(instances: Sequence[ObpInstance], p: Program) -> list[int]:
    """Bins opened on each instance, packing equally long item streams in lockstep.

    Each item goes to the highest-scoring open bin whose remaining capacity
    holds it (ties to the lowest bin index), else a new bin is opened.
    """
    out = [0] * len(instances)
    score = compile_program(p)
    for group in _lockstep_groups(instances, lambda inst: len(inst.items)):
        items = np.array([instances[i].items for i in group], dtype=np.float64)
        capacity = np.array([instances[i].capacity for i in group], dtype=np.float64)
        k, n = items.shape
        rows = np.arange(k)
        remaining = np.full((k, n), -1.0)
        n_bins = np.zeros(k, dtype=np.int64)
        for j in range(n):
            item = items[:, j]
            fits = remaining >= item[:, None]
            any_fit = fits.any(axis=1)
            chosen = np.empty(k, dtype=np.int64)
            if any_fit.any():
                env_item = np.repeat(item, fits.sum(axis=1))
                scores = score({"item": env_item, "cap": remaining[fits]})
                full = np.full((k, n), -np.inf)
                full[fits] = scores
                chosen[any_fit] = np.argmax(full[any_fit], axis=1)
            new = ~any_fit
            chosen[new] = n_bins[new]
            remaining[new, n_bins[new]] = capacity[new]
            n_bins += new
            remaining[rows, chosen] -= item
        for row, i in enumerate(group):
            out[i] = int(n_bins[row])
    return out


def run_obp(instance: ObpInstance, p: Program) -> int:
    """Pack items online; returns the number of bins opened."""
    return pack_bins([instance], p)[0]


def tour_length(dist: np.ndarray, tour: Sequence[int]) -> float:
    total = 0.0
    for a, b in zip(tour, list(tour[1:]) + [tour[0]]):
        total += float(dist[a, b])
    return total


def construct_tours(instances: Sequence[TspInstance], p: Program) -> list[list[int]]:
    """Build one tour per instance; equally sized instances advance in lockstep.

    From city 0, every unvisited city m is scored with d_cm, d_md, n_u and
    avg_md; the lowest score (ties to the lowest index) is visited next.
    """
    out: list[list[int]] = [[] for _ in instances]
    score = compile_program(p)
    needs_avg = "avg_md" in {v for e in p.expressions for v in variables(e)}
    for group in _lockstep_groups(instances, lambda inst: inst.dist.shape[0]):
        dist = np.stack([instances[i].dist for i in group])
        k, n, _ = dist.shape
        rows = np.arange(k)[:, None]
        cand = np.tile(np.arange(1, n), (k, 1))
        d_md = dist[:, 1:, 0]
        # distances from each candidate to the rest of the unvisited set
        row_sums = dist[:, 1:, 1:].sum(axis=2) if needs_avg else None
        current = np.zeros(k, dtype=np.int64)
        tours = [[0] for _ in group]
        while cand.shape[1]:
            n_u = cand.shape[1]
            if needs_avg and n_u == 2:
                # both candidates see the same single distance; take it exactly
                # so rounding in the running sums cannot break the tie
                avg_md = np.repeat(dist[rows[:, 0], cand[:, 0], cand[:, 1]][:, None], 2, axis=1)
            elif needs_avg and n_u > 1:
                avg_md = row_sums / (n_u - 1)
            else:
                avg_md = np.zeros((k, n_u))
            env = {"d_cm": dist[rows, current[:, None], cand], "d_md": d_md, "n_u": float(n_u), "avg_md": avg_md}
            scores = np.broadcast_to(score(env), (k, n_u))
            pick = np.argmin(scores, axis=1)
            current = cand[rows[:, 0], pick]
            keep = np.ones((k, n_u), dtype=bool)
            keep[rows[:, 0], pick] = False
            cand = cand[keep].reshape(k, n_u - 1)
            d_md = d_md[keep].reshape(k, n_u - 1)
            if needs_avg:
                row_sums = row_sums[keep].reshape(k, n_u - 1) - dist[rows, cand, current[:, None]]
            for row, city in enumerate(current):
                tours[row].append(int(city))
        for row, i in enumerate(group):
            out[i] = tours[row]
    return out


def construct_tour(instance: TspInstance, p: Program) -> list[int]:
    return construct_tours([instance], p)[0]


def run_tsp(instance: TspInstance, p: Program) -> float:
    return tour_length(instance.dist, construct_tour(instance, p))


def nearest_neighbor_length(instance: TspInstance) -> float:
    dist = instance.dist
    n = dist.shape[0]
    visited = [False] * n
    visited[0] = True
    tour, current = [0], 0
    for _ in range(n - 1):
        best, best_d = -1, math.inf
        for m in range(n):
            if not visited[m] and dist[current, m] < best_d:
                best, best_d = m, dist[current, m]
        visited[best] = True
        tour.append(best)
        current = best
    return tour_length(dist, tour)


def _symreg_mse(instance: SymregInstance, p: Program) -> float:
    pred = np.broadcast_to(compile_program(p)({"x": instance.x}), instance.x.shape)
    with np.errstate(all="ignore"):
        mse = float(np.mean((pred - instance.y) ** 2))
    if not math.isfinite(mse):
        raise NonFiniteResult("mean squared error overflowed")
    return mse


class Evaluator:
    """Fitness of programs on a fixed instance set; baselines are computed once."""

    def __init__(self, spec: TaskSpec, instances: Sequence[TaskInstance] | None = None):
        self.spec = spec
        self.instances = list(instances) if instances is not None else make_instances(spec)
        if not self.instances:
            raise InvalidParams("at least one instance is required")
        if spec.kind == "OBP":
            self.baselines = [math.ceil(sum(i.items) / i.capacity) for i in self.instances]
        elif spec.kind == "TSP":
            self.baselines = [nearest_neighbor_length(i) for i in self.instances]

    def scores(self, p: Program) -> list[float]:
        """Per-instance scores; raises NonFiniteResult for infeasible programs."""
        if set(p.input_vars) != set(self.spec.input_vars):
            raise SignatureMismatch(
                f"program inputs {p.input_vars} do not match {self.spec.kind} inputs {self.spec.input_vars}"
            )
        if self.spec.kind == "OBP":
            return [b / lb for b, lb in zip(pack_bins(self.instances, p), self.baselines)]
        if self.spec.kind == "TSP":
            tours = construct_tours(self.instances, p)
            return [tour_length(i.dist, t) / nn for i, t, nn in zip(self.instances, tours, self.baselines)]
        return [_symreg_mse(i, p) for i in self.instances]

    def __call__(self, p: Program) -> Fitness:
        try:
            per_instance = self.scores(p)
        except NonFiniteResult:
            return Fitness.infeasible()
        total = 0.0
        for v in per_instance:
            total += v
        value = total / len(per_instance)
        return Fitness(value, True) if math.isfinite(value) else Fitness.infeasible()


def evaluate_candidate(spec: TaskSpec, instances: Sequence[TaskInstance], p: Program) -> Fitness:
    """Mean per-instance score of ``p`` (lower is better); non-finite runs are infeasible."""
    return Evaluator(spec, instances)(p)
