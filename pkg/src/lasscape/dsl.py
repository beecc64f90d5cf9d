"""A small scoring-function language for candidate algorithms.

Programs look like::

    let s = item + cap;
    let t = max(s, 1.5);
    return if_gt(t, 4.0, 1.0, 0.0)

Every program is a sequence of let-bindings followed by one returned
expression over a fixed set of task input variables.  Evaluation is total:
division, ``sqrt``, ``log``, ``exp`` and ``pow`` are guarded so that a finite
environment nearly always produces a finite score.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

KEYWORDS = frozenset({"let", "return"})
BUILTINS: dict[str, int] = {
    "min": 2,
    "max": 2,
    "abs": 1,
    "sqrt": 1,
    "exp": 1,
    "log": 1,
    "pow": 2,
    "if_gt": 4,
}
BINARY_OPS = ("+", "-", "*", "/")
_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2}

DIV_EPS = 1e-9
LOG_EPS = 1e-9
EXP_CAP = 50.0


class DslError(ValueError):
    """Base class for every error raised by the DSL."""


class DslSyntaxError(DslError):
    def __init__(self, message: str, line: int, column: int, lexeme: str):
        super().__init__(f"{message} at line {line}, column {column} near {lexeme!r}")
        self.line = line
        self.column = column
        self.lexeme = lexeme


class LexError(DslError):
    def __init__(self, position: int, line: int, column: int, char: str):
        super().__init__(f"unexpected character {char!r} at line {line}, column {column}")
        self.position = position
        self.line = line
        self.column = column


class UndefinedVariable(DslError):
    def __init__(self, name: str):
        super().__init__(f"undefined variable {name!r}")
        self.name = name


class DuplicateBinding(DslError):
    def __init__(self, name: str):
        super().__init__(f"duplicate binding {name!r}")
        self.name = name


class NonFiniteResult(ArithmeticError):
    """Raised when a guarded primitive still produces inf or nan."""


class InvalidSite(DslError):
    pass


# --------------------------------------------------------------------------
# AST
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple["Expr", ...]


Expr = Num | Var | Neg | BinOp | Call


@dataclass(frozen=True)
class Let:
    name: str
    value: Expr


@dataclass(frozen=True)
class Program:
    statements: tuple[Let, ...]
    result: Expr
    input_vars: tuple[str, ...]

    @property
    def expressions(self) -> tuple[Expr, ...]:
        """Let values in order, then the result expression."""
        return tuple(s.value for s in self.statements) + (self.result,)

    def scope_at(self, stmt: int) -> tuple[str, ...]:
        """Identifiers visible inside statement ``stmt`` (``len(statements)`` is the result)."""
        return self.input_vars + tuple(s.name for s in self.statements[:stmt])


def children(node: Expr) -> tuple[Expr, ...]:
    if isinstance(node, BinOp):
        return (node.left, node.right)
    if isinstance(node, Neg):
        return (node.operand,)
    if isinstance(node, Call):
        return node.args
    return ()


def with_children(node: Expr, kids: Sequence[Expr]) -> Expr:
    if isinstance(node, BinOp):
        return BinOp(node.op, kids[0], kids[1])
    if isinstance(node, Neg):
        return Neg(kids[0])
    if isinstance(node, Call):
        return Call(node.func, tuple(kids))
    return node


def depth(node: Expr) -> int:
    kids = children(node)
    return 1 + (max(depth(k) for k in kids) if kids else 0)


def program_depth(p: Program) -> int:
    return max(depth(e) for e in p.expressions)


def variables(node: Expr) -> Iterator[str]:
    """Variable occurrences in pre-order, duplicates included."""
    if isinstance(node, Var):
        yield node.name
    for k in children(node):
        yield from variables(k)


def literals(node: Expr) -> Iterator[float]:
    if isinstance(node, Num):
        yield node.value
    for k in children(node):
        yield from literals(k)


# --------------------------------------------------------------------------
# Lexer
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Token:
    kind: str  # keyword | identifier | number | function | operator | punctuation
    text: str
    line: int = field(default=0, compare=False)
    column: int = field(default=0, compare=False)


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<operator>[-+*/=])
  | (?P<punctuation>[(),;])
    """,
    re.VERBOSE,
)


def tokenize(source: str) -> list[Token]:
    tokens: list[Token] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise LexError(pos, line, pos - line_start + 1, source[pos])
        kind = m.lastgroup
        text = m.group()
        col = pos - line_start + 1
        if kind == "ws":
            newlines = text.count("\n")
            if newlines:
                line += newlines
                line_start = pos + text.rfind("\n") + 1
        elif kind == "name":
            if text in KEYWORDS:
                kind = "keyword"
            elif text in BUILTINS:
                kind = "function"
            else:
                kind = "identifier"
            tokens.append(Token(kind, text, line, col))
        else:
            tokens.append(Token(kind, text, line, col))
        pos = m.end()
    return tokens


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


class _Parser:
    def __init__(self, source: str, input_vars: Sequence[str]):
        self.tokens = tokenize(source)
        self.pos = 0
        self.input_vars = tuple(input_vars)
        self.scope: set[str] = set(self.input_vars)
        lines = source.split("\n")
        self.eof = (len(lines), len(lines[-1]) + 1)

    def peek(self) -> Token | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def error(self, message: str) -> DslSyntaxError:
        tok = self.peek()
        if tok is None:
            return DslSyntaxError(message + " (end of input)", self.eof[0], self.eof[1], "")
        return DslSyntaxError(message, tok.line, tok.column, tok.text)

    def next(self) -> Token:
        tok = self.peek()
        if tok is None:
            raise self.error("unexpected end of input")
        self.pos += 1
        return tok

    def expect(self, text: str) -> Token:
        tok = self.peek()
        if tok is None or tok.text != text or tok.kind == "identifier":
            raise self.error(f"expected {text!r}")
        self.pos += 1
        return tok

    def at(self, text: str) -> bool:
        tok = self.peek()
        return tok is not None and tok.text == text and tok.kind in ("keyword", "operator", "punctuation")

    def program(self) -> Program:
        statements: list[Let] = []
        while self.at("let"):
            self.next()
            tok = self.peek()
            if tok is None or tok.kind != "identifier":
                raise self.error("expected identifier after 'let'")
            self.next()
            self.expect("=")
            value = self.expr()
            self.expect(";")
            if tok.text in self.scope:
                raise DuplicateBinding(tok.text)
            self.scope.add(tok.text)
            statements.append(Let(tok.text, value))
        self.expect("return")
        result = self.expr()
        if self.at(";"):
            self.next()
        if self.peek() is not None:
            raise self.error("unexpected trailing input")
        return Program(tuple(statements), result, self.input_vars)

    def expr(self, min_prec: int = 1) -> Expr:
        left = self.unary()
        while True:
            tok = self.peek()
            if tok is None or tok.kind != "operator" or tok.text not in _PRECEDENCE:
                return left
            prec = _PRECEDENCE[tok.text]
            if prec < min_prec:
                return left
            self.next()
            right = self.expr(prec + 1)
            left = BinOp(tok.text, left, right)

    def unary(self) -> Expr:
        if self.at("-"):
            self.next()
            tok = self.peek()
            if tok is not None and tok.kind == "number":
                self.next()
                return Num(-float(tok.text))
            return Neg(self.unary())
        return self.atom()

    def atom(self) -> Expr:
        tok = self.peek()
        if tok is None:
            raise self.error("expected expression")
        if tok.kind == "number":
            self.next()
            return Num(float(tok.text))
        if tok.kind == "identifier":
            self.next()
            if tok.text not in self.scope:
                raise UndefinedVariable(tok.text)
            return Var(tok.text)
        if tok.kind == "function":
            self.next()
            self.expect("(")
            args = [self.expr()]
            while self.at(","):
                self.next()
                args.append(self.expr())
            self.expect(")")
            if len(args) != BUILTINS[tok.text]:
                raise DslSyntaxError(
                    f"{tok.text} takes {BUILTINS[tok.text]} arguments, got {len(args)}",
                    tok.line, tok.column, tok.text,
                )
            return Call(tok.text, tuple(args))
        if self.at("("):
            self.next()
            inner = self.expr()
            self.expect(")")
            return inner
        raise self.error("expected expression")


def parse(source: str, input_vars: Sequence[str]) -> Program:
    """Parse ``source`` into a :class:`Program` over ``input_vars``."""
    return _Parser(source, input_vars).program()


# --------------------------------------------------------------------------
# Serialization and canonical form
# --------------------------------------------------------------------------


def format_number(value: float) -> str:
    """Shortest decimal that round-trips to the same binary64 value."""
    text = repr(float(value))
    if text in ("inf", "-inf", "nan"):
        raise ValueError(f"cannot print non-finite literal {value}")
    return text


def _fmt(node: Expr, ctx: int = 0, right: bool = False) -> str:
    # ctx: precedence of the enclosing binary operator (0 = none)
    if isinstance(node, Num):
        return format_number(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.func}(" + ", ".join(_fmt(a) for a in node.args) + ")"
    if isinstance(node, Neg):
        inner = node.operand
        if isinstance(inner, (Var, Call)):
            return "-" + _fmt(inner)
        return "-(" + _fmt(inner) + ")"
    prec = _PRECEDENCE[node.op]
    text = f"{_fmt(node.left, prec)} {node.op} {_fmt(node.right, prec, right=True)}"
    if prec < ctx or (right and prec == ctx):
        return f"({text})"
    return text


def format_expr(node: Expr) -> str:
    return _fmt(node)


def serialize(p: Program) -> str:
    """Canonical layout of ``p`` without renaming its bindings."""
    lines = [f"let {s.name} = {_fmt(s.value)};" for s in p.statements]
    lines.append(f"return {_fmt(p.result)}")
    return "\n".join(lines)


def rename(node: Expr, mapping: Mapping[str, str]) -> Expr:
    if isinstance(node, Var):
        return Var(mapping.get(node.name, node.name))
    kids = children(node)
    if not kids:
        return node
    return with_children(node, [rename(k, mapping) for k in kids])


def normalize_names(p: Program) -> Program:
    """Rename let-bound names to v0, v1, ... in definition order."""
    mapping = {s.name: f"v{i}" for i, s in enumerate(p.statements)}
    statements = tuple(Let(mapping[s.name], rename(s.value, mapping)) for s in p.statements)
    return Program(statements, rename(p.result, mapping), p.input_vars)


@dataclass(frozen=True)
class CanonicalForm:
    text: str
    id: str


def sha256_hex(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def canonicalize(p: Program) -> CanonicalForm:
    text = serialize(normalize_names(p))
    return CanonicalForm(text, sha256_hex(text))


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


def _check(value):
    if isinstance(value, np.ndarray) and value.ndim:
        ok = np.isfinite(value).all()
    else:
        ok = math.isfinite(value)
    if not ok:
        raise NonFiniteResult("non-finite intermediate value")
    return value


def _guarded_div(x, y):
    den = np.where(y < 0, -1.0, 1.0) * np.maximum(np.abs(y), DIV_EPS)
    return x / den


def _pow(x, y):
    mag = np.exp(y * np.log(np.abs(x) + LOG_EPS))
    odd = (np.floor(y) == y) & (np.mod(y, 2.0) == 1.0)
    return np.where(odd & (x < 0), -mag, mag)


_BINARY = {
    "+": np.add,
    "-": np.subtract,
    "*": np.multiply,
    "/": _guarded_div,
}

_CALLS = {
    "min": np.minimum,
    "max": np.maximum,
    "abs": np.abs,
    "sqrt": lambda a: np.sqrt(np.abs(a)),
    "exp": lambda a: np.exp(np.minimum(a, EXP_CAP)),
    "log": lambda a: np.log(np.maximum(a, LOG_EPS)),
    "pow": _pow,
    "if_gt": lambda a, b, x, y: np.where(a > b, x, y),
}


def _raise_nonfinite(env):
    raise NonFiniteResult("non-finite constant subexpression")


# Inputs and literals are finite, so the first inf/nan any node can produce
# comes from an overflow or invalid operation; trapping those floating-point
# errors is equivalent to checking every node's value.
_TRAP = dict(over="raise", invalid="raise", divide="raise", under="ignore")


def _compile(node: Expr):
    """Turn ``node`` into a closure over an environment dict.

    Variable-free subtrees are folded once at compile time.
    """
    if isinstance(node, Num):
        value = np.float64(node.value)
        return lambda env: value
    if isinstance(node, Var):
        name = node.name
        return lambda env: env[name]
    inner = _compile_open(node)
    if any(True for _ in variables(node)):
        return inner
    try:
        with np.errstate(**_TRAP):
            value = inner({})
    except FloatingPointError:
        return _raise_nonfinite
    return lambda env: value


def _compile_open(node: Expr):
    if isinstance(node, Neg):
        inner = _compile(node.operand)
        return lambda env: -inner(env)
    if isinstance(node, BinOp):
        fn = _BINARY[node.op]
        left = _compile(node.left)
        right = _compile(node.right)
        return lambda env: fn(left(env), right(env))
    fn = _CALLS[node.func]
    args = [_compile(a) for a in node.args]
    if len(args) == 1:
        (a0,) = args
        return lambda env: fn(a0(env))
    if len(args) == 2:
        a0, a1 = args
        return lambda env: fn(a0(env), a1(env))
    return lambda env: fn(*(a(env) for a in args))


def compile_program(p: Program):
    """Compile ``p`` into ``f(env) -> ndarray`` evaluating elementwise over array inputs."""
    steps = [(s.name, _compile(s.value)) for s in p.statements]
    result = _compile(p.result)
    inputs = p.input_vars

    def run(env: Mapping[str, object]) -> np.ndarray:
        scope = {name: np.asarray(env[name], dtype=np.float64) for name in inputs}
        try:
            with np.errstate(**_TRAP):
                for name, fn in steps:
                    scope[name] = fn(scope)
                out = result(scope)
        except FloatingPointError as exc:
            raise NonFiniteResult(str(exc)) from None
        return np.asarray(_check(out), dtype=np.float64)

    return run


def evaluate_batch(p: Program, env: Mapping[str, object]) -> np.ndarray:
    """Evaluate ``p`` elementwise over array-valued (broadcastable) inputs.

    Inputs must be finite; compiled programs used in hot loops skip that check.
    """
    for name in p.input_vars:
        if not np.all(np.isfinite(env[name])):
            raise ValueError(f"input {name!r} is not finite")
    return compile_program(p)(env)


def evaluate(p: Program, env: Mapping[str, float]) -> float:
    missing = [v for v in p.input_vars if v not in env]
    if missing:
        raise KeyError(f"environment does not bind {missing}")
    return float(evaluate_batch(p, env))


# --------------------------------------------------------------------------
# Sites, grafting and random generation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Site:
    """Address of an expression node: statement index (len(statements) is the result) and child path."""

    stmt: int
    path: tuple[int, ...] = ()


def _subtree_paths(node: Expr, prefix: tuple[int, ...] = ()) -> Iterator[tuple[int, ...]]:
    yield prefix
    for i, k in enumerate(children(node)):
        yield from _subtree_paths(k, prefix + (i,))


def sites(p: Program) -> list[Site]:
    return [Site(i, path) for i, e in enumerate(p.expressions) for path in _subtree_paths(e)]


def subtree_at(p: Program, site: Site) -> Expr:
    exprs = p.expressions
    if not 0 <= site.stmt < len(exprs):
        raise InvalidSite(f"no statement {site.stmt}")
    node = exprs[site.stmt]
    for i in site.path:
        kids = children(node)
        if not 0 <= i < len(kids):
            raise InvalidSite(f"path {site.path} leaves the tree")
        node = kids[i]
    return node


def _replace(node: Expr, path: tuple[int, ...], new: Expr) -> Expr:
    if not path:
        return new
    kids = list(children(node))
    kids[path[0]] = _replace(kids[path[0]], path[1:], new)
    return with_children(node, kids)


def replace_at(p: Program, site: Site, new: Expr) -> Program:
    subtree_at(p, site)
    n = len(p.statements)
    if site.stmt == n:
        return Program(p.statements, _replace(p.result, site.path, new), p.input_vars)
    statements = list(p.statements)
    old = statements[site.stmt]
    statements[site.stmt] = Let(old.name, _replace(old.value, site.path, new))
    return Program(tuple(statements), p.result, p.input_vars)


def graft(host: Program, donor: Expr, site: Site, rng: np.random.Generator) -> Program:
    """Replace the node at ``site`` with ``donor``, repairing out-of-scope references.

    Each distinct unbound donor identifier (in order of first occurrence) is
    mapped to a uniformly chosen identifier visible at the site.
    """
    subtree_at(host, site)
    scope = host.scope_at(site.stmt)
    mapping: dict[str, str] = {}
    for name in variables(donor):
        if name not in scope and name not in mapping:
            mapping[name] = scope[int(rng.integers(len(scope)))]
    return replace_at(host, site, rename(donor, mapping))


def random_expr(
    rng: np.random.Generator,
    scope: Sequence[str],
    max_depth: int,
    leaf_prob: float = 0.3,
    var_prob: float = 0.7,
    _root: bool = True,
) -> Expr:
    if max_depth <= 1 or (not _root and rng.random() < leaf_prob):
        if scope and rng.random() < var_prob:
            return Var(scope[int(rng.integers(len(scope)))])
        return Num(round(float(rng.uniform(0.1, 10.0)), 2))
    kind = rng.random()
    if kind < 0.55:
        op = BINARY_OPS[int(rng.integers(4))]
        left = random_expr(rng, scope, max_depth - 1, leaf_prob, var_prob, False)
        right = random_expr(rng, scope, max_depth - 1, leaf_prob, var_prob, False)
        return BinOp(op, left, right)
    if kind < 0.9:
        names = list(BUILTINS)
        func = names[int(rng.integers(len(names)))]
        args = tuple(random_expr(rng, scope, max_depth - 1, leaf_prob, var_prob, False) for _ in range(BUILTINS[func]))
        return Call(func, args)
    return Neg(random_expr(rng, scope, max_depth - 1, leaf_prob, var_prob, False))


def random_program(rng: np.random.Generator, input_vars: Sequence[str], max_depth: int) -> Program:
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    input_vars = tuple(input_vars)
    statements: list[Let] = []
    for i in range(int(rng.integers(0, 4))):
        scope = input_vars + tuple(s.name for s in statements)
        statements.append(Let(f"v{i}", random_expr(rng, scope, max_depth)))
    scope = input_vars + tuple(s.name for s in statements)
    return Program(tuple(statements), random_expr(rng, scope, max_depth), input_vars)


def map_literals(node: Expr, fn) -> Expr:
    if isinstance(node, Num):
        return Num(fn(node.value))
    kids = children(node)
    if not kids:
        return node
    return with_children(node, [map_literals(k, fn) for k in kids])


def is_finite_program(p: Program) -> bool:
    return all(math.isfinite(v) for e in p.expressions for v in literals(e))
