"""Expression trees for candidate equations.

A candidate is a tree over a closed operator set whose leaves are literals,
data variables, or fittable parameters. Variables and parameters live in
disjoint namespaces declared by the caller.

Grammar::

    expr  := term (('+'|'-') term)*
    term  := unary (('*'|'/') unary)*
    unary := '-' unary | power
    power := atom ('^' unary)?
    atom  := number | ident | func '(' expr ')' | '(' expr ')'
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union

import numpy as np

UNARY_FUNCS = ("sin", "cos", "tan", "exp", "log", "sqrt", "abs")
BINARY_FUNCS = ("pow",)
FUNCTIONS = UNARY_FUNCS + BINARY_FUNCS
BINARY_OPS = ("+", "-", "*", "/", "^")

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_NUMBER = re.compile(r"(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?")


class ExpressionError(ValueError):
    """Base class for malformed expressions."""


class ParseError(ExpressionError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownIdentifierError(ExpressionError):
    pass


class ArityError(ExpressionError):
    pass


# -- nodes -------------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Param:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str  # "neg" or one of UNARY_FUNCS
    arg: "Node"


@dataclass(frozen=True)
class Binary:
    op: str  # one of BINARY_OPS
    left: "Node"
    right: "Node"


Node = Union[Num, Var, Param, Unary, Binary]

ZERO = Num(0.0)
ONE = Num(1.0)


def walk(node: Node) -> Iterator[Node]:
    yield node
    if isinstance(node, Unary):
        yield from walk(node.arg)
    elif isinstance(node, Binary):
        yield from walk(node.left)
        yield from walk(node.right)


def param_names(node: Node) -> set[str]:
    return {n.name for n in walk(node) if isinstance(n, Param)}


def var_names(node: Node) -> set[str]:
    return {n.name for n in walk(node) if isinstance(n, Var)}


def references(node: Node, name: str) -> bool:
    return any(isinstance(n, Param) and n.name == name for n in walk(node))


def depth_of(node: Node, name: str, _d: int = 0) -> int:
    """Deepest level at which parameter ``name`` occurs (-1 if absent)."""
    if isinstance(node, Param):
        return _d if node.name == name else -1
    if isinstance(node, Unary):
        return depth_of(node.arg, name, _d + 1)
    if isinstance(node, Binary):
        return max(depth_of(node.left, name, _d + 1), depth_of(node.right, name, _d + 1))
    return -1


def size(node: Node) -> int:
    return sum(1 for _ in walk(node))


# -- candidate expression ----------------------------------------------------


@dataclass(frozen=True)
class CandidateExpression:
    """A parsed equation skeleton with its variable and parameter tables."""

    root: Node
    variables: tuple[str, ...]
    parameters: tuple[str, ...]
    source_text: str = ""
    _compiled: object = field(default=None, init=False, repr=False, compare=False)

    @property
    def n_params(self) -> int:
        return len(self.parameters)

    def param_index(self, name: str) -> int:
        return self.parameters.index(name)

    def serialize(self) -> str:
        return to_text(self.root)

    def __str__(self) -> str:
        return self.serialize()

    def compiled(self):
        fn = self._compiled
        if fn is None:
            fn = compile_nodes([self.root], self.variables, self.parameters)
            object.__setattr__(self, "_compiled", fn)
        return fn


def make_expression(root: Node, variables: Sequence[str], parameters: Sequence[str] | None = None,
                    source_text: str = "") -> CandidateExpression:
    """Wrap a tree, keeping only parameters that still occur in it."""
    used = param_names(root)
    if parameters is None:
        params = tuple(sorted(used))
    else:
        params = tuple(p for p in parameters if p in used)
    missing = used - set(params)
    if missing:
        raise UnknownIdentifierError(f"undeclared parameters {sorted(missing)}")
    unknown_vars = var_names(root) - set(variables)
    if unknown_vars:
        raise UnknownIdentifierError(f"undeclared variables {sorted(unknown_vars)}")
    return CandidateExpression(root, tuple(variables), params, source_text or to_text(root))


# -- parsing -----------------------------------------------------------------


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        m = _NUMBER.match(text, i)
        if m:
            tokens.append(("num", m.group(), i))
            i = m.end()
            continue
        m = _IDENT.match(text, i)
        if m:
            tokens.append(("ident", m.group(), i))
            i = m.end()
            continue
        if ch in "+-*/^(),":
            tokens.append(("op", ch, i))
            i += 1
            continue
        raise ParseError(f"unexpected character {ch!r}", i)
    return tokens


class _Parser:
    def __init__(self, text: str, variables: set[str], parameters: set[str]):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0
        self.variables = variables
        self.parameters = parameters

    def _eof_offset(self) -> int:
        return max(len(self.text.rstrip()) - 1, 0)

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self):
        tok = self.peek()
        if tok is None:
            raise ParseError("unexpected end of input", self._eof_offset())
        self.pos += 1
        return tok

    def expect(self, value: str):
        tok = self.peek()
        if tok is None:
            raise ParseError(f"expected {value!r} but input ended", self._eof_offset())
        if tok[1] != value:
            raise ParseError(f"expected {value!r}, found {tok[1]!r}", tok[2])
        self.pos += 1

    def parse(self) -> Node:
        if not self.tokens:
            raise ParseError("empty expression", 0)
        node = self.expr()
        tok = self.peek()
        if tok is not None:
            raise ParseError(f"unexpected token {tok[1]!r}", tok[2])
        return node

    def expr(self) -> Node:
        node = self.term()
        while (tok := self.peek()) is not None and tok[1] in ("+", "-"):
            self.pos += 1
            node = Binary(tok[1], node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while (tok := self.peek()) is not None and tok[1] in ("*", "/"):
            self.pos += 1
            node = Binary(tok[1], node, self.unary())
        return node

    def unary(self) -> Node:
        tok = self.peek()
        if tok is not None and tok[1] == "-":
            self.pos += 1
            nxt = self.peek()
            operand, bare = self.power_or_unary()
            if bare and nxt is not None and nxt[0] == "num":
                return Num(-operand.value)
            return Unary("neg", operand)
        node, _ = self.power()
        return node

    def power_or_unary(self) -> tuple[Node, bool]:
        tok = self.peek()
        if tok is not None and tok[1] == "-":
            return self.unary(), False
        return self.power()

    def power(self) -> tuple[Node, bool]:
        base, bare = self.atom()
        tok = self.peek()
        if tok is not None and tok[1] == "^":
            self.pos += 1
            return Binary("^", base, self.unary()), False
        return base, bare

    def atom(self) -> tuple[Node, bool]:
        kind, value, offset = self.take()
        if kind == "num":
            number = float(value)
            if not math.isfinite(number):
                raise ParseError(f"literal {value!r} overflows", offset)
            return Num(number), True
        if kind == "ident":
            nxt = self.peek()
            if value in FUNCTIONS:
                if nxt is None or nxt[1] != "(":
                    raise ParseError(f"function {value!r} must be called", offset)
                self.pos += 1
                args = [self.expr()]
                while (t := self.peek()) is not None and t[1] == ",":
                    self.pos += 1
                    args.append(self.expr())
                self.expect(")")
                want = 2 if value in BINARY_FUNCS else 1
                if len(args) != want:
                    raise ArityError(f"{value} takes {want} argument(s), got {len(args)} at offset {offset}")
                if value == "pow":
                    return Binary("^", args[0], args[1]), False
                return Unary(value, args[0]), False
            if value in self.variables:
                return Var(value), False
            if value in self.parameters:
                return Param(value), False
            raise UnknownIdentifierError(f"unknown identifier {value!r} at offset {offset}")
        if value == "(":
            node = self.expr()
            self.expect(")")
            return node, False
        raise ParseError(f"unexpected token {value!r}", offset)


def parse_expression(text: str, variables: Sequence[str], parameters: Sequence[str]) -> CandidateExpression:
    """Parse ``text`` into a :class:`CandidateExpression`.

    Every identifier must be declared in exactly one of ``variables`` or
    ``parameters``, and every declared parameter must occur in the text.
    """
    variables = tuple(variables)
    parameters = tuple(parameters)
    for names, label in ((variables, "variable"), (parameters, "parameter")):
        if len(set(names)) != len(names):
            raise ExpressionError(f"duplicate {label} names in {names}")
        for name in names:
            if not _IDENT.fullmatch(name) or name in FUNCTIONS:
                raise ExpressionError(f"invalid {label} name {name!r}")
    clash = set(variables) & set(parameters)
    if clash:
        raise ExpressionError(f"names declared as both variable and parameter: {sorted(clash)}")
    root = _Parser(text, set(variables), set(parameters)).parse()
    unused = set(parameters) - param_names(root)
    if unused:
        raise ExpressionError(f"declared parameters never used: {sorted(unused)}")
    return CandidateExpression(root, variables, parameters, text)


# -- serialization -----------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


def _prec(node: Node) -> int:
    if isinstance(node, Binary):
        return _PREC[node.op]
    if isinstance(node, Unary) and node.op == "neg":
        return 3
    if isinstance(node, Num) and (node.value < 0 or math.copysign(1.0, node.value) < 0):
        return 3
    return 5


def _num_text(value: float) -> str:
    return repr(float(value))


def to_text(node: Node) -> str:
    """Canonical text with minimal parentheses; re-parses to the same tree."""
    if isinstance(node, Num):
        return _num_text(node.value)
    if isinstance(node, (Var, Param)):
        return node.name
    if isinstance(node, Unary):
        if node.op == "neg":
            inner = to_text(node.arg)
            if isinstance(node.arg, Num) or _prec(node.arg) < 3:
                inner = f"({inner})"
            return "-" + inner
        return f"{node.op}({to_text(node.arg)})"
    p = _PREC[node.op]
    left, right = to_text(node.left), to_text(node.right)
    if node.op == "^":
        if _prec(node.left) < 5:
            left = f"({left})"
        if _prec(node.right) < 3:
            right = f"({right})"
        return f"{left}^{right}"
    if _prec(node.left) < p:
        left = f"({left})"
    if _prec(node.right) <= p:
        right = f"({right})"
    return f"{left} {node.op} {right}"


# -- folding -----------------------------------------------------------------

_NP_UNARY = {
    "neg": np.negative, "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp,
    "log": np.log, "sqrt": np.sqrt, "abs": np.abs,
}


def _apply_binary(op: str, a, b):
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        return a / b
    return np.power(a, b)


def _is(node: Node, value: float) -> bool:
    return isinstance(node, Num) and node.value == value


def fold(node: Node) -> Node:
    """Fold literal-only subtrees and identity/annihilator patterns."""
    if isinstance(node, Unary):
        arg = fold(node.arg)
        if isinstance(arg, Num):
            with np.errstate(all="ignore"):
                value = float(_NP_UNARY[node.op](np.float64(arg.value)))
            if math.isfinite(value):
                return Num(value)
        if node.op == "neg" and isinstance(arg, Unary) and arg.op == "neg":
            return arg.arg
        return Unary(node.op, arg)
    if isinstance(node, Binary):
        a, b = fold(node.left), fold(node.right)
        op = node.op
        if isinstance(a, Num) and isinstance(b, Num):
            with np.errstate(all="ignore"):
                value = float(_apply_binary(op, np.float64(a.value), np.float64(b.value)))
            if math.isfinite(value):
                return Num(value)
        if op == "+":
            if _is(a, 0):
                return b
            if _is(b, 0):
                return a
        elif op == "-":
            if _is(b, 0):
                return a
            if _is(a, 0):
                return fold(Unary("neg", b))
        elif op == "*":
            if _is(a, 0) or _is(b, 0):
                return ZERO
            if _is(a, 1):
                return b
            if _is(b, 1):
                return a
        elif op == "/":
            if _is(a, 0):
                return ZERO
            if _is(b, 1):
                return a
        elif op == "^":
            if _is(b, 1):
                return a
            if _is(b, 0):
                return ONE
        return Binary(op, a, b)
    return node


# -- substitution and differentiation ---------------------------------------


def substitute(node: Node, values: dict[str, float]) -> Node:
    """Replace parameters named in ``values`` with literals (unfolded)."""
    if isinstance(node, Param):
        return Num(float(values[node.name])) if node.name in values else node
    if isinstance(node, Unary):
        return Unary(node.op, substitute(node.arg, values))
    if isinstance(node, Binary):
        return Binary(node.op, substitute(node.left, values), substitute(node.right, values))
    return node


def substitute_parameter(expr: CandidateExpression, param_index: int, value: float) -> CandidateExpression:
    if not 0 <= param_index < expr.n_params:
        raise IndexError(f"parameter index {param_index} out of range for {expr.n_params} parameters")
    name = expr.parameters[param_index]
    root = fold(substitute(expr.root, {name: value}))
    params = tuple(p for p in expr.parameters if p != name)
    return make_expression(root, expr.variables, params)


def derivative(node: Node, name: str) -> Node:
    """Symbolic partial derivative of ``node`` w.r.t. parameter ``name``, folded."""
    return fold(_d(node, name))


def _d(node: Node, name: str) -> Node:
    if isinstance(node, Param):
        return ONE if node.name == name else ZERO
    if isinstance(node, (Num, Var)):
        return ZERO
    if isinstance(node, Unary):
        u = node.arg
        du = fold(_d(u, name))
        if _is(du, 0):
            return ZERO
        op = node.op
        if op == "neg":
            return Unary("neg", du)
        if op == "sin":
            outer = Unary("cos", u)
        elif op == "cos":
            outer = Unary("neg", Unary("sin", u))
        elif op == "tan":
            outer = Binary("+", ONE, Binary("^", Unary("tan", u), Num(2.0)))
        elif op == "exp":
            outer = Unary("exp", u)
        elif op == "log":
            return Binary("/", du, u)
        elif op == "sqrt":
            return Binary("/", du, Binary("*", Num(2.0), Unary("sqrt", u)))
        elif op == "abs":
            outer = Binary("/", u, Unary("abs", u))
        else:  # pragma: no cover - closed operator set
            raise ExpressionError(f"cannot differentiate {op}")
        return Binary("*", du, outer)
    a, b = node.left, node.right
    da, db = fold(_d(a, name)), fold(_d(b, name))
    op = node.op
    if op in ("+", "-"):
        return Binary(op, da, db)
    if op == "*":
        return Binary("+", Binary("*", da, b), Binary("*", a, db))
    if op == "/":
        # (da*b - a*db) / b^2
        if _is(db, 0):
            return Binary("/", da, b)
        return Binary("/", Binary("-", Binary("*", da, b), Binary("*", a, db)), Binary("^", b, Num(2.0)))
    # a^b = b*a^(b-1)*da + a^b*log(a)*db
    first = Binary("*", Binary("*", b, Binary("^", a, Binary("-", b, ONE))), da)
    second = Binary("*", Binary("*", Binary("^", a, b), Unary("log", a)), db)
    return Binary("+", first, second)


def differentiate_wrt(expr: CandidateExpression, param_index: int) -> CandidateExpression:
    if not 0 <= param_index < expr.n_params:
        raise IndexError(f"parameter index {param_index} out of range for {expr.n_params} parameters")
    root = derivative(expr.root, expr.parameters[param_index])
    return make_expression(root, expr.variables, expr.parameters)


# -- evaluation --------------------------------------------------------------


def _emit(node: Node, var_index: dict, par_index: dict, consts: list) -> str:
    if isinstance(node, Num):
        consts.append(np.float64(node.value))
        return f"K[{len(consts) - 1}]"
    if isinstance(node, Var):
        return f"X[{var_index[node.name]}]"
    if isinstance(node, Param):
        return f"P[{par_index[node.name]}]"
    if isinstance(node, Unary):
        inner = _emit(node.arg, var_index, par_index, consts)
        if node.op == "neg":
            return f"(-{inner})"
        return f"np.{'absolute' if node.op == 'abs' else node.op}({inner})"
    left = _emit(node.left, var_index, par_index, consts)
    right = _emit(node.right, var_index, par_index, consts)
    if node.op == "^":
        return f"np.power({left}, {right})"
    return f"({left} {node.op} {right})"


def compile_nodes(nodes: Sequence[Node], variables: Sequence[str], parameters: Sequence[str]):
    """Compile trees into one callable ``fn(columns, theta) -> list of arrays``.

    ``columns`` is a sequence of 1-D float arrays ordered like ``variables``;
    ``theta`` a float64 array ordered like ``parameters``. Outputs may be
    scalars when a tree has no variable leaves.
    """
    var_index = {v: i for i, v in enumerate(variables)}
    par_index = {p: i for i, p in enumerate(parameters)}
    consts: list = []
    bodies = [_emit(n, var_index, par_index, consts) for n in nodes]
    src = f"lambda X, P: [{', '.join(bodies)}]"
    return eval(src, {"np": np, "K": consts})  # noqa: S307 - generated from a validated tree


def evaluate_nodes(fn, columns: Sequence[np.ndarray], theta: np.ndarray, n: int) -> list[np.ndarray]:
    with np.errstate(all="ignore"):
        outs = fn(columns, np.asarray(theta, dtype=np.float64))
    result = []
    for out in outs:
        arr = np.asarray(out, dtype=np.float64)
        if arr.ndim == 0:
            arr = np.full(n, float(arr))
        result.append(arr)
    return result


@dataclass(frozen=True)
class Dataset:
    """Immutable inputs ``X`` (n x d) and targets ``y`` (n)."""

    inputs: np.ndarray
    targets: np.ndarray
    column_names: tuple[str, ...] | None = None

    def __post_init__(self):
        X = np.array(self.inputs, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        y = np.array(self.targets, dtype=np.float64).ravel()
        if X.ndim != 2:
            raise ValueError("inputs must be a 2-D array")
        if X.shape[0] < 1:
            raise ValueError("dataset needs at least one row")
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"inputs have {X.shape[0]} rows but targets have {y.shape[0]}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite values")
        if self.column_names is not None:
            names = tuple(self.column_names)
            if len(names) != X.shape[1]:
                raise ValueError("column_names length does not match input width")
            object.__setattr__(self, "column_names", names)
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "_columns", tuple(np.ascontiguousarray(X[:, j]) for j in range(X.shape[1])))

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def columns_for(self, variables: Sequence[str]) -> tuple[np.ndarray, ...]:
        """Input columns in the order of ``variables`` (by name when named)."""
        cols = self._columns
        if self.column_names is None:
            if len(variables) > len(cols):
                raise ValueError(f"expression uses {len(variables)} variables, dataset has {len(cols)} columns")
            return cols[: len(variables)]
        try:
            return tuple(cols[self.column_names.index(v)] for v in variables)
        except ValueError as exc:
            raise ValueError(f"dataset has no column for variable: {exc}") from None


def evaluate(expr: CandidateExpression, dataset: Dataset, theta) -> tuple[np.ndarray, np.ndarray]:
    """Predictions of ``expr`` on every row plus a finite-mask.

    Domain violations (log of a negative, division by zero, overflow) show
    up as ``False`` entries in the mask instead of raising.
    """
    theta = np.asarray(theta, dtype=np.float64).ravel()
    if theta.shape[0] != expr.n_params:
        raise ValueError(f"theta has length {theta.shape[0]}, expression needs {expr.n_params}")
    (pred,) = evaluate_nodes(expr.compiled(), dataset.columns_for(expr.variables), theta, dataset.n)
    return pred, np.isfinite(pred)
