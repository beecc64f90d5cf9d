"""Code-similarity metrics between a parent and an offspring candidate.

Four measures plus the relative performance change:

* BLEU over DSL tokens (n = 1..4, uniform weights, add-one smoothing for
  n >= 2 when nothing matches, brevity penalty).
* Weighted BLEU, where keywords and built-in function names weigh 5 in the
  unigram precision.
* AST match: clipped overlap of anonymized subtrees, relative to the
  reference.
* Dataflow match: clipped overlap of ``computedFrom`` edges with positional
  variable names, relative to the reference.
"""

from __future__ import annotations

import keyword
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from . import dsl
from .dsl import BinOp, Call, Expr, Neg, Num, Program, Token, Var

MAX_ORDER = 4
KEYWORD_WEIGHT = 5.0
DELTA_EPS = 1e-12


class InfeasibleOperand(ValueError):
    pass


# --------------------------------------------------------------------------
# BLEU
# --------------------------------------------------------------------------


def _texts(tokens: Sequence[Token | str]) -> list[str]:
    return [t.text if isinstance(t, Token) else t for t in tokens]


def _ngrams(seq: Sequence[str], n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def _weight(token: str) -> float:
    return KEYWORD_WEIGHT if token in dsl.KEYWORDS or token in dsl.BUILTINS else 1.0


def _bleu(ref: list[str], cand: list[str], weighted: bool) -> float:
    if not ref or not cand:
        return 0.0
    log_sum = 0.0
    for n in range(1, MAX_ORDER + 1):
        cand_counts = _ngrams(cand, n)
        ref_counts = _ngrams(ref, n)
        if n == 1 and weighted:
            num = sum(_weight(g[0]) * min(c, ref_counts[g]) for g, c in cand_counts.items())
            den = sum(_weight(g[0]) * c for g, c in cand_counts.items())
        else:
            num = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
            den = sum(cand_counts.values())
        if n >= 2 and num == 0:
            num, den = num + 1, den + 1
        if num == 0:
            return 0.0
        log_sum += math.log(num / den) / MAX_ORDER
    c, r = len(cand), len(ref)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum)


def bleu(ref_tokens: Sequence[Token | str], cand_tokens: Sequence[Token | str]) -> float:
    return _bleu(_texts(ref_tokens), _texts(cand_tokens), weighted=False)


def weighted_bleu(ref_tokens: Sequence[Token | str], cand_tokens: Sequence[Token | str]) -> float:
    return _bleu(_texts(ref_tokens), _texts(cand_tokens), weighted=True)


_FALLBACK_RE = re.compile(r"\d+\.\d*|\.\d+|\d+|\w+|[^\w\s]")
_FOREIGN_KEYWORDS = frozenset(keyword.kwlist) | dsl.KEYWORDS


def fallback_tokenize(text: str) -> list[Token]:
    """Whitespace/punctuation split for code that is not DSL."""
    out = []
    for m in _FALLBACK_RE.finditer(text):
        lexeme = m.group()
        if lexeme in _FOREIGN_KEYWORDS:
            kind = "keyword"
        elif lexeme in dsl.BUILTINS:
            kind = "function"
        elif lexeme[0].isdigit() or lexeme[0] == ".":
            kind = "number"
        elif lexeme[0].isalpha() or lexeme[0] == "_":
            kind = "identifier"
        else:
            kind = "punctuation"
        out.append(Token(kind, lexeme))
    return out


# --------------------------------------------------------------------------
# AST match
# --------------------------------------------------------------------------


def _sexp(node: Expr) -> str:
    if isinstance(node, Var):
        return "ID"
    if isinstance(node, Num):
        return "NUM"
    if isinstance(node, Neg):
        return f"(neg {_sexp(node.operand)})"
    if isinstance(node, BinOp):
        return f"({node.op} {_sexp(node.left)} {_sexp(node.right)})"
    return f"(call {node.func} " + " ".join(_sexp(a) for a in node.args) + ")"


def _expr_subtrees(node: Expr, out: list[str]) -> None:
    out.append(_sexp(node))
    for k in dsl.children(node):
        _expr_subtrees(k, out)


def subtrees(p: Program) -> Counter:
    """Anonymized subtree multiset.

    A let statement is a ``(let ID <expr>)`` node above its value; the returned
    expression is its own root.
    """
    out: list[str] = []
    for s in p.statements:
        out.append(f"(let ID {_sexp(s.value)})")
        _expr_subtrees(s.value, out)
    _expr_subtrees(p.result, out)
    return Counter(out)


def _clipped_ratio(ref: Counter, cand: Counter, empty_ref: float) -> float:
    total = sum(ref.values())
    if total == 0:
        return empty_ref
    return sum(min(c, cand[k]) for k, c in ref.items()) / total


def ast_match(ref: Program, cand: Program) -> float:
    return _clipped_ratio(subtrees(ref), subtrees(cand), 1.0)


# --------------------------------------------------------------------------
# Dataflow match
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DataflowGraph:
    edges: tuple[tuple[str, str, str], ...]

    def counter(self) -> Counter:
        return Counter(self.edges)


def extract_dfg(p: Program) -> DataflowGraph:
    names = {s.name: f"v{i}" for i, s in enumerate(p.statements)}
    edges: list[tuple[str, str, str]] = []
    for s in p.statements:
        target = names[s.name]
        edges += [(target, names.get(v, v), "computedFrom") for v in dsl.variables(s.value)]
    edges += [("ret", names.get(v, v), "computedFrom") for v in dsl.variables(p.result)]
    return DataflowGraph(tuple(edges))


def dataflow_match(ref: Program, cand: Program) -> float:
    return _clipped_ratio(extract_dfg(ref).counter(), extract_dfg(cand).counter(), 1.0)


# --------------------------------------------------------------------------
# Performance delta and pair table
# --------------------------------------------------------------------------


def performance_delta(parent_fitness: float, offspring_fitness: float) -> tuple[float, float]:
    if not (math.isfinite(parent_fitness) and math.isfinite(offspring_fitness)):
        raise InfeasibleOperand("performance delta needs two finite fitness values")
    signed = (offspring_fitness - parent_fitness) / (abs(parent_fitness) + DELTA_EPS)
    return signed, abs(signed)


@dataclass(frozen=True)
class SimilarityPair:
    eval_index: int
    operator: str
    parent_id: str
    offspring_id: str
    bleu: float
    weighted_bleu: float
    ast_match: float | None
    dataflow_match: float | None
    delta_signed: float
    delta_abs: float


PAIR_FIELDS = (
    "eval_index",
    "operator",
    "parent_id",
    "offspring_id",
    "bleu",
    "weighted_bleu",
    "ast_match",
    "dataflow_match",
    "delta_signed",
    "delta_abs",
)
METRIC_FIELDS = ("bleu", "weighted_bleu", "ast_match", "dataflow_match")


def _tokens(cand) -> list[Token]:
    if cand.program is not None:
        return dsl.tokenize(cand.canonical_text)
    return fallback_tokenize(cand.code)


def compare(parent, offspring) -> tuple[float, float, float | None, float | None]:
    """The four similarity scores with ``parent`` as reference."""
    ref_tok, cand_tok = _tokens(parent), _tokens(offspring)
    b = bleu(ref_tok, cand_tok)
    wb = weighted_bleu(ref_tok, cand_tok)
    if parent.program is None or offspring.program is None:
        return b, wb, None, None
    return b, wb, ast_match(parent.program, offspring.program), dataflow_match(parent.program, offspring.program)


def pair_table(runlog) -> list[SimilarityPair]:
    """One row per (distinct parent, offspring) of every feasible non-INIT event."""
    first: dict[str, object] = {}
    best: dict[str, float] = {}
    for ev in runlog.events:
        first.setdefault(ev.canonical_id, ev)
        if ev.fitness.feasible:
            best[ev.canonical_id] = min(ev.fitness.value, best.get(ev.canonical_id, math.inf))
    rows: list[SimilarityPair] = []
    cache: dict[tuple[str, str], tuple] = {}
    for ev in runlog.events:
        if not ev.parent_ids or not ev.fitness.feasible:
            continue
        for pid in dict.fromkeys(ev.parent_ids):
            if pid not in best:
                continue
            parent = first[pid]
            key = (pid, ev.canonical_id)
            if key not in cache:
                cache[key] = compare(parent.candidate, ev.candidate)
            b, wb, am, dm = cache[key]
            signed, absolute = performance_delta(best[pid], ev.fitness.value)
            rows.append(SimilarityPair(ev.eval_index, ev.operator, pid, ev.canonical_id, b, wb, am, dm, signed, absolute))
    return rows


def iter_column(rows: Iterable[SimilarityPair], name: str) -> list[float | None]:
    return [getattr(r, name) for r in rows]
