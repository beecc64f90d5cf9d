"""Offspring generators: a deterministic mock and an OpenAI-compatible LLM client.

Both produce candidate *source text* from parent programs.  The mock realizes
the four operator roles directly in DSL space:

E1  fresh program, parents ignored
E2  one statement of parent 2 rebuilt around a subtree of parent 1
M1  one subtree of the parent replaced by a small random expression
M2  numeric literals perturbed log-normally (parameter tuning)
"""

from __future__ import annotations

import hashlib
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import httpx
import numpy as np

from . import dsl
from .dsl import BinOp, Num, Program

log = logging.getLogger(__name__)

OPERATORS = ("E1", "E2", "M1", "M2")
ARITY = {"E1": (0, 5), "E2": (2, 2), "M1": (1, 1), "M2": (1, 1)}

M2_SIGMA = 0.3
M1_DEPTH = 2
M1_VAR_PROB = 1.0
E2_JOINS = ("+", "-", "*", "/")
LITERAL_LIMIT = 1e12


class ArityMismatch(ValueError):
    pass


class HttpError(RuntimeError):
    def __init__(self, message: str, status: int | None = None, attempts: int = 0):
        super().__init__(message)
        self.status = status
        self.attempts = attempts


class EmptyReply(ValueError):
    pass


class NoCodeBlock(ValueError):
    pass


def check_arity(op: str, n_parents: int) -> None:
    if op not in ARITY:
        raise ArityMismatch(f"unknown operator {op!r}")
    lo, hi = ARITY[op]
    if not lo <= n_parents <= hi:
        raise ArityMismatch(f"{op} takes {lo}..{hi} parents, got {n_parents}")


def _uniform(rng: np.random.Generator, items: Sequence):
    return items[int(rng.integers(len(items)))]


def _perturb(value: float, rng: np.random.Generator) -> float:
    out = value * float(np.exp(rng.normal(0.0, M2_SIGMA)))
    return float(np.clip(out, -LITERAL_LIMIT, LITERAL_LIMIT))


def mock_offspring(
    op: str,
    parents: Sequence[Program],
    rng: np.random.Generator,
    input_vars: Sequence[str] | None = None,
    max_depth: int = 4,
) -> Program:
    check_arity(op, len(parents))
    if op == "E1":
        if input_vars is None:
            if not parents:
                raise ArityMismatch("E1 without parents needs input_vars")
            input_vars = parents[0].input_vars
        return dsl.random_program(rng, input_vars, max_depth)
    if op == "E2":
        donor_src, host = parents
        donor = dsl.subtree_at(donor_src, _uniform(rng, dsl.sites(donor_src)))
        site = dsl.Site(int(rng.integers(len(host.expressions))))
        fresh = dsl.random_expr(rng, host.scope_at(site.stmt), M1_DEPTH, var_prob=M1_VAR_PROB)
        child = dsl.graft(host, donor, site, rng)
        combined = BinOp(_uniform(rng, E2_JOINS), dsl.subtree_at(child, site), fresh)
        return dsl.replace_at(child, site, combined)
    (parent,) = parents
    if op == "M1":
        site = _uniform(rng, dsl.sites(parent))
        fresh = dsl.random_expr(rng, parent.scope_at(site.stmt), M1_DEPTH, var_prob=M1_VAR_PROB)
        return dsl.graft(parent, fresh, site, rng)
    if any(True for e in parent.expressions for _ in dsl.literals(e)):
        perturbed = Program(
            tuple(dsl.Let(s.name, dsl.map_literals(s.value, lambda v: _perturb(v, rng))) for s in parent.statements),
            dsl.map_literals(parent.result, lambda v: _perturb(v, rng)),
            parent.input_vars,
        )
        return perturbed
    site = _uniform(rng, dsl.sites(parent))
    scale = float(np.exp(rng.normal(0.0, M2_SIGMA)))
    return dsl.replace_at(parent, site, BinOp("*", Num(scale), dsl.subtree_at(parent, site)))


def mock_generate(op: str, parents: Sequence[Program], rng: np.random.Generator, **kwargs) -> str:
    """Offspring source text for ``op``; deterministic per ``rng`` state."""
    return dsl.serialize(mock_offspring(op, parents, rng, **kwargs))


class MockGenerator:
    name = "mock"

    def __init__(self, max_depth: int = 4):
        self.max_depth = max_depth

    def __call__(self, op, parents, rng, task_spec) -> tuple[str, str | None]:
        programs = [p.program for p in parents]
        text = mock_generate(op, programs, rng, input_vars=task_spec.input_vars, max_depth=self.max_depth)
        return text, None


# --------------------------------------------------------------------------
# Prompts
# --------------------------------------------------------------------------

GRAMMAR = """\
program   := { "let" ident "=" expr ";" } "return" expr
expr      := expr ("+" | "-" | "*" | "/") expr | "-" expr | "(" expr ")"
           | number | ident | call
call      := min(a, b) | max(a, b) | abs(a) | sqrt(a) | exp(a) | log(a)
           | pow(a, b) | if_gt(a, b, x, y)      # x if a > b else y
Division, sqrt, log, exp and pow are guarded and never crash."""

TASK_DOCS = {
    "OBP": (
        "Online bin packing. Items arrive one at a time and must be placed immediately. "
        "Your program scores every open bin that can hold the item; the item goes to the "
        "highest-scoring bin, and a new bin is opened when none fits. Goal: use as few bins as possible.",
        {"item": "size of the incoming item", "cap": "remaining capacity of the bin being scored"},
    ),
    "TSP": (
        "Travelling salesman, constructive. Starting from city 0, your program scores every "
        "unvisited city; the lowest-scoring city is visited next. Goal: shortest closed tour.",
        {
            "d_cm": "distance from the current city to the candidate city",
            "d_md": "distance from the candidate city back to the start city",
            "n_u": "number of unvisited cities",
            "avg_md": "mean distance from the candidate to the other unvisited cities",
        },
    ),
    "SYMREG": (
        "Symbolic regression. Your program is the model y = f(x); it is scored by the mean "
        "squared error against observed samples. Goal: lowest error.",
        {"x": "the input value"},
    ),
}

INSTRUCTIONS = {
    "E1": (
        "Design a new scoring function that is as different as possible from the examples "
        "seen so far. Explore a new idea rather than editing an existing one."
    ),
    "E2": (
        "Study the parent functions below, identify the ideas they share, and write a new "
        "function that recombines those ideas in a different way."
    ),
    "M1": (
        "Modify the structure of the function below to obtain a variant that may perform "
        "better. Change how the inputs are combined, not just the constants."
    ),
    "M2": (
        "Keep the structure of the function below and tune its numeric parameters to "
        "improve its performance."
    ),
}


def build_prompt(op: str, parents: Sequence[str], task_spec) -> str:
    """Prompt text for ``op``; ``parents`` are canonical program texts."""
    check_arity(op, len(parents))
    description, inputs = TASK_DOCS[task_spec.kind]
    parts = [
        "You are designing a heuristic scoring function in a small expression language.",
        "",
        "Task: " + description,
        "",
        "Input variables:",
        *(f"- {name}: {doc}" for name, doc in inputs.items()),
        "",
        "Grammar:",
        GRAMMAR,
        "",
    ]
    if op == "E1":
        if parents:
            parts.append("Examples seen so far:")
            for text in parents:
                parts += ["```", text, "```"]
            parts.append("")
    else:
        label = "Parent function" if len(parents) == 1 else "Parent functions"
        parts.append(label + ":")
        for i, text in enumerate(parents, 1):
            if len(parents) > 1:
                parts.append(f"Parent {i}:")
            parts += ["```", text, "```"]
        parts.append("")
    parts += [
        INSTRUCTIONS[op],
        "",
        "Reply with exactly one fenced code block containing the complete program.",
    ]
    return "\n".join(parts)


_FENCE_RE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)
_INLINE_FENCE_RE = re.compile(r"```(.*?)```", re.DOTALL)


def extract_code_block(reply: str) -> str:
    if reply is None or not reply.strip():
        raise EmptyReply("empty reply")
    m = _FENCE_RE.search(reply) or _INLINE_FENCE_RE.search(reply)
    if m is None:
        return reply.strip()
    code = m.group(1).strip()
    if not code:
        raise NoCodeBlock("first fenced block is empty")
    return code


# --------------------------------------------------------------------------
# LLM client
# --------------------------------------------------------------------------


@dataclass
class LlmEndpointConfig:
    base_url: str
    model: str
    api_key_env: str = "LAS_API_KEY"
    temperature: float = 1.0
    timeout: float = 60.0
    max_retries: int = 4
    max_in_flight: int = 4

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


RETRY_STATUS = frozenset({408, 409, 429, 500, 502, 503, 504})


class LlmClient:
    """Blocking chat-completions client, shareable across threads."""

    def __init__(
        self,
        cfg: LlmEndpointConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        seed: int | None = None,
    ):
        self.cfg = cfg
        key = os.environ.get(cfg.api_key_env, "")
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self._http = httpx.Client(
            base_url=cfg.base_url.rstrip("/"), headers=headers, timeout=cfg.timeout, transport=transport
        )
        self._slots = threading.Semaphore(cfg.max_in_flight)
        self._sleep = sleep
        self._jitter = random.Random(seed)
        self._lock = threading.Lock()
        self.attempts = 0

    def close(self) -> None:
        self._http.close()

    def backoff(self, attempt: int) -> float:
        with self._lock:
            factor = self._jitter.uniform(0.8, 1.2)
        return (2.0**attempt) * factor

    def complete(self, prompt: str) -> str:
        body = {
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
        }
        last: HttpError | None = None
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                self._sleep(self.backoff(attempt - 1))
            with self._lock:
                self.attempts += 1
            try:
                with self._slots:
                    resp = self._http.post("/chat/completions", json=body)
            except httpx.TransportError as exc:
                last = HttpError(f"transport error: {exc}", attempts=attempt + 1)
                log.warning("chat request failed (%s), attempt %d", exc, attempt + 1)
                continue
            if resp.status_code == 200:
                try:
                    return resp.json()["choices"][0]["message"]["content"]
                except (ValueError, KeyError, IndexError, TypeError) as exc:
                    raise HttpError(f"malformed response: {exc}", 200, attempt + 1) from exc
            last = HttpError(f"HTTP {resp.status_code}", resp.status_code, attempt + 1)
            if resp.status_code not in RETRY_STATUS:
                raise last
            log.warning("chat request returned %d, attempt %d", resp.status_code, attempt + 1)
        raise last


def llm_generate(op: str, parents: Sequence[str], cfg_or_client, task_spec) -> tuple[str, str]:
    """Ask the endpoint for an offspring; returns (source text, digest of the raw reply)."""
    client = cfg_or_client if isinstance(cfg_or_client, LlmClient) else LlmClient(cfg_or_client)
    reply = client.complete(build_prompt(op, parents, task_spec))
    digest = "sha256:" + hashlib.sha256(reply.encode("utf-8")).hexdigest()
    try:
        return extract_code_block(reply), digest
    except (EmptyReply, NoCodeBlock):
        return "", digest


class LlmGenerator:
    name = "llm"

    def __init__(self, client: LlmClient):
        self.client = client

    def __call__(self, op, parents, rng, task_spec) -> tuple[str, str | None]:
        return llm_generate(op, [p.canonical_text for p in parents], self.client, task_spec)
