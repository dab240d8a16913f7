"""Algebraic expression trees.

An expression is an immutable tree of ``Variable``, ``Constant``, ``Unary``
and ``Binary`` nodes. The module provides vectorized evaluation (guarded or
honest-NaN), a bounded simplification pass, deterministic infix rendering,
an infix parser for the benchmark grammar, constant-slot enumeration for the
refinement stage, and a bridge that replays a tree onto an autodiff tape so
constants can be differentiated.

Grammar accepted by :func:`parse`::

    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := '-' factor | power
    power  := atom ('^' factor)?
    atom   := NUMBER | 'pi' | VARIABLE | NAME '(' expr ')' | '(' expr ')'

Variables are ``x1 .. xd``. Integer exponents up to 9 expand to repeated
multiplication; any other exponent ``p`` becomes ``exp(p*log(base))``.
``sqrt`` and ``sinh`` are accepted and desugared the same way, so trees only
ever contain the core operator set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .autodiff import Tape, Value, guarded_div, guarded_eval

__all__ = [
    "Expression",
    "Variable",
    "Constant",
    "Unary",
    "Binary",
    "ParseError",
    "UNARY_OPS",
    "BINARY_OPS",
    "evaluate",
    "simplify",
    "to_string",
    "parse",
    "complexity",
    "depth",
    "variables_used",
    "constant_slots",
    "with_constants",
    "to_tape",
    "to_json",
    "from_json",
]

UNARY_OPS = ("id", "sin", "cos", "tan", "exp", "log", "cosh", "square")
BINARY_OPS = ("add", "sub", "mul", "div")

_BINARY_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/"}


@dataclass(frozen=True)
class Variable:
    index: int


@dataclass(frozen=True)
class Constant:
    value: float


@dataclass(frozen=True)
class Unary:
    op: str
    child: "Expression"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expression"
    right: "Expression"


Expression = Union[Variable, Constant, Unary, Binary]


class ParseError(ValueError):
    """Syntax or name error while parsing an infix expression."""

    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} (at position {pos})")
        self.pos = pos


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(e: Expression, X: np.ndarray, guarded: bool = False) -> np.ndarray:
    """Evaluate ``e`` pointwise over the rows of ``X`` (shape n x d).

    Guarded mode uses the training-time clamped operator semantics; unguarded
    mode is plain IEEE arithmetic and propagates NaN/inf honestly.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"X must be 2-D (n points x d variables), got shape {X.shape}")
    with np.errstate(all="ignore"):
        out = _eval(e, X, guarded)
    if np.ndim(out) == 0:
        out = np.full(X.shape[0], float(out))
    return out


def _eval(e, X, guarded):
    if isinstance(e, Constant):
        return e.value
    if isinstance(e, Variable):
        if e.index >= X.shape[1]:
            raise ValueError(f"expression uses x{e.index + 1} but data has {X.shape[1]} columns")
        return X[:, e.index]
    if isinstance(e, Unary):
        child = _eval(e.child, X, guarded)
        if guarded:
            return guarded_eval(e.op, child)
        return _PLAIN_UNARY[e.op](child)
    left = _eval(e.left, X, guarded)
    right = _eval(e.right, X, guarded)
    if e.op == "add":
        return left + right
    if e.op == "sub":
        return left - right
    if e.op == "mul":
        return left * right
    if e.op == "div":
        return guarded_div(left, right) if guarded else left / right
    raise ValueError(f"unknown binary operator {e.op!r}")


_PLAIN_UNARY = {
    "id": lambda x: x,
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "cosh": np.cosh,
    "square": np.square,
}


# ---------------------------------------------------------------------------
# Structure helpers
# ---------------------------------------------------------------------------

def complexity(e: Expression) -> int:
    """Node count of the tree."""
    if isinstance(e, (Variable, Constant)):
        return 1
    if isinstance(e, Unary):
        return 1 + complexity(e.child)
    return 1 + complexity(e.left) + complexity(e.right)


def depth(e: Expression) -> int:
    if isinstance(e, (Variable, Constant)):
        return 1
    if isinstance(e, Unary):
        return 1 + depth(e.child)
    return 1 + max(depth(e.left), depth(e.right))


def variables_used(e: Expression) -> set[int]:
    if isinstance(e, Variable):
        return {e.index}
    if isinstance(e, Constant):
        return set()
    if isinstance(e, Unary):
        return variables_used(e.child)
    return variables_used(e.left) | variables_used(e.right)


def constant_slots(e: Expression) -> list[float]:
    """Values of all Constant nodes in stable (pre-order) slot order."""
    out: list[float] = []

    def walk(node):
        if isinstance(node, Constant):
            out.append(node.value)
        elif isinstance(node, Unary):
            walk(node.child)
        elif isinstance(node, Binary):
            walk(node.left)
            walk(node.right)

    walk(e)
    return out


def with_constants(e: Expression, values) -> Expression:
    """Rebuild ``e`` with Constant nodes replaced in slot order."""
    values = list(values)
    it = iter(values)

    def walk(node):
        if isinstance(node, Constant):
            return Constant(float(next(it)))
        if isinstance(node, Variable):
            return node
        if isinstance(node, Unary):
            return Unary(node.op, walk(node.child))
        return Binary(node.op, walk(node.left), walk(node.right))

    rebuilt = walk(e)
    try:
        next(it)
    except StopIteration:
        return rebuilt
    raise ValueError("more values than constant slots")


# ---------------------------------------------------------------------------
# Simplification: bounded rewrite passes, semantics-preserving
# ---------------------------------------------------------------------------

def simplify(e: Expression) -> Expression:
    """Constant folding, identity removal and sum/product flattening.

    Runs full passes until a fixpoint, bounded by the tree depth, so it
    always terminates. Folding uses the guarded operator semantics so that
    constants stay finite.
    """
    bound = depth(e) + 2
    for _ in range(bound):
        simplified = _simplify_once(e)
        if simplified == e:
            return simplified
        e = simplified
    return e


def _const(v) -> Constant:
    return Constant(float(v))


def _is_const(e, value=None) -> bool:
    if not isinstance(e, Constant):
        return False
    return value is None or e.value == value


def _fold_unary(op, child):
    v = guarded_eval(op, child.value)
    return _const(v) if math.isfinite(v) else None


def _fold_binary(op, a, b):
    if op == "add":
        v = a + b
    elif op == "sub":
        v = a - b
    elif op == "mul":
        v = a * b
    else:
        v = float(guarded_div(a, b))
    return _const(v) if math.isfinite(v) else None


def _simplify_once(e: Expression) -> Expression:
    if isinstance(e, (Variable, Constant)):
        return e
    if isinstance(e, Unary):
        child = _simplify_once(e.child)
        if e.op == "id":
            return child
        if isinstance(child, Constant):
            folded = _fold_unary(e.op, child)
            if folded is not None:
                return folded
        return Unary(e.op, child)

    left = _simplify_once(e.left)
    right = _simplify_once(e.right)
    if isinstance(left, Constant) and isinstance(right, Constant):
        folded = _fold_binary(e.op, left.value, right.value)
        if folded is not None:
            return folded
    if e.op in ("add", "sub"):
        return _rebuild_sum(Binary(e.op, left, right))
    if e.op == "mul":
        return _rebuild_product(Binary(e.op, left, right))
    # division: only the safe identities
    if e.op == "div" and _is_const(right, 1.0):
        return left
    return Binary(e.op, left, right)


def _sum_terms(e, sign, terms, const):
    """Flatten nested add/sub into signed terms plus a constant."""
    if isinstance(e, Constant):
        return const + sign * e.value
    if isinstance(e, Binary) and e.op in ("add", "sub"):
        const = _sum_terms(e.left, sign, terms, const)
        return _sum_terms(e.right, sign if e.op == "add" else -sign, terms, const)
    terms.append((sign, e))
    return const


def _rebuild_sum(e: Expression) -> Expression:
    terms: list[tuple[int, Expression]] = []
    const = _sum_terms(e, 1, terms, 0.0)
    if not math.isfinite(const):
        return e
    if not terms:
        return _const(const)
    items = list(terms)
    # lead with the constant when the first term is negative (keeps "5 - x"
    # shaped sums from growing a spurious 0)
    const_placed = const == 0.0
    if not const_placed and items[0][0] < 0:
        items.insert(0, (1, _const(const)))
        const_placed = True
    sign0, head = items[0]
    acc = head if sign0 > 0 else Binary("sub", _const(0.0), head)
    for sign, term in items[1:]:
        acc = Binary("add" if sign > 0 else "sub", acc, term)
    if not const_placed:
        acc = Binary("sub", acc, _const(-const)) if const < 0 else Binary("add", acc, _const(const))
    return acc


def _product_factors(e, factors, coeff):
    if isinstance(e, Constant):
        return coeff * e.value
    if isinstance(e, Binary) and e.op == "mul":
        coeff = _product_factors(e.left, factors, coeff)
        return _product_factors(e.right, factors, coeff)
    factors.append(e)
    return coeff


def _rebuild_product(e: Expression) -> Expression:
    factors: list[Expression] = []
    coeff = _product_factors(e, factors, 1.0)
    if not math.isfinite(coeff):
        return e
    if coeff == 0.0 or not factors:
        return _const(coeff)
    # pair equal adjacent factors into squares: x*x -> x^2
    merged: list[Expression] = []
    i = 0
    while i < len(factors):
        if i + 1 < len(factors) and factors[i] == factors[i + 1]:
            merged.append(Unary("square", factors[i]))
            i += 2
        else:
            merged.append(factors[i])
            i += 1
    acc = merged[0]
    for f in merged[1:]:
        acc = Binary("mul", acc, f)
    if coeff != 1.0:
        acc = Binary("mul", _const(coeff), acc)
    return acc


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def to_string(e: Expression, digits: int = 6) -> str:
    """Deterministic infix rendering with minimal parentheses.

    ``digits`` controls significant digits for constants; pass 17 for an
    exact round trip through :func:`parse`.
    """
    return _render(e, 0, digits)


def _fmt_const(v: float, digits: int) -> str:
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return format(v, f".{digits}g")


# precedence levels: sum=10, product=20, unary-minus handled via constants,
# power=30, atoms=40
def _render(e, level, digits):
    if isinstance(e, Variable):
        return f"x{e.index + 1}"
    if isinstance(e, Constant):
        s = _fmt_const(e.value, digits)
        return f"({s})" if s.startswith("-") and level > 10 else s
    if isinstance(e, Unary):
        if e.op == "id":
            return _render(e.child, level, digits)
        if e.op == "square":
            s = f"{_render(e.child, 31, digits)}^2"
            return f"({s})" if level > 30 else s
        return f"{e.op}({_render(e.child, 0, digits)})"
    sym = _BINARY_SYMBOL[e.op]
    if e.op in ("add", "sub"):
        # absorb a negative constant on the right into the operator
        right = e.right
        if isinstance(right, Constant) and right.value < 0:
            sym = "+" if sym == "-" else "-"
            right = _const(-right.value)
        s = f"{_render(e.left, 10, digits)} {sym} {_render(right, 11, digits)}"
        return f"({s})" if level > 10 else s
    s = f"{_render(e.left, 20, digits)}{sym}{_render(e.right, 21, digits)}"
    return f"({s})" if level > 20 else s


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_FUNCTIONS = ("sin", "cos", "tan", "exp", "log", "ln", "cosh", "sinh", "sqrt", "abs")


def _tokenize(text: str):
    tokens = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c in "+-*/^(),":
            tokens.append((c, c, i))
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i
            while j < n and (text[j].isdigit() or text[j] == "."):
                j += 1
            if j < n and text[j] in "eE" and j + 1 < n and (text[j + 1].isdigit() or text[j + 1] in "+-"):
                j += 2
                while j < n and text[j].isdigit():
                    j += 1
            try:
                value = float(text[i:j])
            except ValueError:
                raise ParseError(f"bad number {text[i:j]!r}", i) from None
            tokens.append(("num", value, i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(("name", text[i:j], i))
            i = j
            continue
        raise ParseError(f"unexpected character {c!r}", i)
    tokens.append(("end", None, n))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos]

    def take(self, kind=None):
        tok = self.tokens[self.pos]
        if kind is not None and tok[0] != kind:
            raise ParseError(f"expected {kind!r}, found {tok[1]!r}", tok[2])
        self.pos += 1
        return tok

    def parse(self) -> Expression:
        e = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise ParseError(f"unexpected trailing input {tok[1]!r}", tok[2])
        return e

    def expr(self) -> Expression:
        e = self.term()
        while self.peek()[0] in ("+", "-"):
            op = self.take()[0]
            rhs = self.term()
            e = Binary("add" if op == "+" else "sub", e, rhs)
        return e

    def term(self) -> Expression:
        e = self.factor()
        while self.peek()[0] in ("*", "/"):
            op = self.take()[0]
            rhs = self.factor()
            e = Binary("mul" if op == "*" else "div", e, rhs)
        return e

    def factor(self) -> Expression:
        if self.peek()[0] == "-":
            self.take()
            operand = self.factor()
            if isinstance(operand, Constant):
                return Constant(-operand.value)
            return Binary("mul", Constant(-1.0), operand)
        return self.power()

    def power(self) -> Expression:
        base = self.atom()
        if self.peek()[0] != "^":
            return base
        self.take()
        exponent = self.factor()
        return _expand_power(base, exponent)

    def atom(self) -> Expression:
        kind, value, pos = self.peek()
        if kind == "num":
            self.take()
            return Constant(float(value))
        if kind == "(":
            self.take()
            e = self.expr()
            self.take(")")
            return e
        if kind == "name":
            self.take()
            if self.peek()[0] == "(":
                if value not in _FUNCTIONS:
                    raise ParseError(f"unknown function {value!r}", pos)
                self.take("(")
                arg = self.expr()
                self.take(")")
                return _make_call(value, arg)
            if value == "pi":
                return Constant(math.pi)
            if len(value) > 1 and value[0] == "x" and value[1:].isdigit():
                index = int(value[1:])
                if index < 1:
                    raise ParseError("variable indices start at x1", pos)
                return Variable(index - 1)
            raise ParseError(f"unknown name {value!r}", pos)
        raise ParseError(f"expected a value, found {value!r}" if value is not None else "unexpected end of input", pos)


def _make_call(name: str, arg: Expression) -> Expression:
    if name == "ln":
        name = "log"
    if name == "sqrt":
        return Unary("exp", Binary("mul", Constant(0.5), Unary("log", arg)))
    if name == "sinh":
        # (e^x - e^(-x)) / 2
        pos = Unary("exp", arg)
        neg = Unary("exp", Binary("mul", Constant(-1.0), arg))
        return Binary("mul", Constant(0.5), Binary("sub", pos, neg))
    if name == "abs":
        # even powers are not in the tree op set; sqrt(x^2) form keeps it total
        return Unary("exp", Binary("mul", Constant(0.5), Unary("log", Unary("square", arg))))
    return Unary(name, arg)


def _expand_power(base: Expression, exponent: Expression) -> Expression:
    folded = simplify(exponent)
    if isinstance(folded, Constant):
        v = folded.value
        if v == round(v) and 0 <= v <= 9:
            k = int(round(v))
            if k == 0:
                return Constant(1.0)
            acc = base
            for _ in range(k - 1):
                acc = Binary("mul", acc, base)
            return acc
        return Unary("exp", Binary("mul", Constant(float(v)), Unary("log", base)))
    return Unary("exp", Binary("mul", folded, Unary("log", base)))


def parse(text: str) -> Expression:
    """Parse an infix expression into a tree (see module docstring)."""
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def to_json(e: Expression) -> dict:
    if isinstance(e, Variable):
        return {"kind": "var", "index": e.index}
    if isinstance(e, Constant):
        return {"kind": "const", "value": e.value}
    if isinstance(e, Unary):
        return {"kind": "unary", "op": e.op, "child": to_json(e.child)}
    return {"kind": "binary", "op": e.op, "left": to_json(e.left), "right": to_json(e.right)}


def from_json(doc) -> Expression:
    if isinstance(doc, str):
        doc = json.loads(doc)
    kind = doc["kind"]
    if kind == "var":
        return Variable(int(doc["index"]))
    if kind == "const":
        return Constant(float(doc["value"]))
    if kind == "unary":
        return Unary(doc["op"], from_json(doc["child"]))
    if kind == "binary":
        return Binary(doc["op"], from_json(doc["left"]), from_json(doc["right"]))
    raise ValueError(f"bad expression document: kind={kind!r}")


# ---------------------------------------------------------------------------
# Autodiff bridge (guarded semantics; used by the constant refiner)
# ---------------------------------------------------------------------------

def to_tape(e: Expression, tape: Tape, columns: list[Value]) -> tuple[Value, list[Value]]:
    """Record ``e`` on ``tape`` with every Constant as a fresh leaf.

    ``columns`` holds one Value per input variable (each an (n,) leaf).
    Returns the root Value and the constant leaves in slot order, so
    gradients with respect to the constants can be read after ``backward``.
    """
    consts: list[Value] = []

    def build(node):
        if isinstance(node, Constant):
            leaf = tape.leaf(node.value)
            consts.append(leaf)
            return leaf
        if isinstance(node, Variable):
            return columns[node.index]
        if isinstance(node, Unary):
            child = build(node.child)
            if node.op == "id":
                return child
            return tape.apply(node.op, child)
        left = build(node.left)
        right = build(node.right)
        if node.op == "div":
            return tape.apply("gdiv", left, right)
        return tape.apply(node.op, left, right)

    return build(e), consts
