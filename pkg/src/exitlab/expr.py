"""Arithmetic expressions for drifts, diffusion entries, and boundary data.

A small hand-rolled tokenizer and Pratt parser produce an immutable AST.
Evaluation goes through a flat postfix program (compiled once, cached) so
the inner simulation loops can run on whole numpy batches; the AST itself
stays around for symbolic differentiation and printing.

Grammar notes:
  * precedence  ^  >  unary-  >  * /  >  + -   with ^ right-associative;
  * variables are positional: x1..xN (flattened subsystem coordinates),
    u1..uN (control coordinates), and t;
  * functions: sin cos exp log tanh abs (unary), min max (binary);
  * no implicit multiplication ("2x" is an error).

Error offsets are 1-based byte positions into the source string.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from .errors import DerivativeError, EvalError, ParseError

__all__ = [
    "Expr", "Num", "Var", "Neg", "Bin", "Call",
    "parse", "to_string", "variables", "evaluate",
    "differentiate", "compile_program", "Program",
]

FUNCTIONS = {
    "sin": 1, "cos": 1, "exp": 1, "log": 1, "tanh": 1, "abs": 1,
    "min": 2, "max": 2,
}


class Expr:
    """Base class for AST nodes. Nodes are frozen and hashable."""

    __slots__ = ()

    def __str__(self):
        return to_string(self)


@dataclass(frozen=True)
class Num(Expr):
    value: float


@dataclass(frozen=True)
class Var(Expr):
    name: str

    @property
    def kind(self):
        # 'x', 'u' or 't'
        return self.name[0]

    @property
    def index(self):
        """1-based coordinate index; 0 for the time variable."""
        return 0 if self.name == "t" else int(self.name[1:])


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr


@dataclass(frozen=True)
class Bin(Expr):
    op: str  # one of + - * / ^
    lhs: Expr
    rhs: Expr


@dataclass(frozen=True)
class Call(Expr):
    fn: str
    args: tuple


# --------------------------------------------------------------------------
# tokenizer

_NUM, _IDENT, _OP, _LPAREN, _RPAREN, _COMMA, _END = range(7)
_OP_CHARS = "+-*/^"


def _tokenize(src):
    toks = []
    i, n = 0, len(src)
    while i < n:
        c = src[i]
        if c in " \t\r\n":
            i += 1
            continue
        start = i
        if c.isdigit() or (c == "." and i + 1 < n and src[i + 1].isdigit()):
            while i < n and (src[i].isdigit() or src[i] == "."):
                i += 1
            if i < n and src[i] in "eE":
                j = i + 1
                if j < n and src[j] in "+-":
                    j += 1
                if j < n and src[j].isdigit():
                    i = j
                    while i < n and src[i].isdigit():
                        i += 1
            text = src[start:i]
            try:
                float(text)
            except ValueError:
                raise ParseError(f"bad number literal '{text}'", start + 1)
            toks.append((_NUM, text, start + 1))
        elif c.isalpha() or c == "_":
            while i < n and (src[i].isalnum() or src[i] == "_"):
                i += 1
            toks.append((_IDENT, src[start:i], start + 1))
        elif c in _OP_CHARS:
            toks.append((_OP, c, start + 1))
            i += 1
        elif c == "(":
            toks.append((_LPAREN, c, start + 1))
            i += 1
        elif c == ")":
            toks.append((_RPAREN, c, start + 1))
            i += 1
        elif c == ",":
            toks.append((_COMMA, c, start + 1))
            i += 1
        else:
            raise ParseError(f"unexpected character {c!r}", start + 1)
    toks.append((_END, "", n + 1))
    return toks


# --------------------------------------------------------------------------
# Pratt parser

_BINDING = {"+": 10, "-": 10, "*": 20, "/": 20, "^": 40}
_UNARY_BINDING = 30  # between */ and ^


def _valid_var(name):
    if name == "t":
        return True
    if name[0] in "xu" and len(name) > 1:
        digits = name[1:]
        return digits.isdigit() and digits[0] != "0"
    return False


class _Parser:
    def __init__(self, toks):
        self.toks = toks
        self.pos = 0

    def peek(self):
        return self.toks[self.pos]

    def advance(self):
        tok = self.toks[self.pos]
        self.pos += 1
        return tok

    def expect_rparen(self):
        kind, _, pos = self.peek()
        if kind != _RPAREN:
            raise ParseError("unbalanced parenthesis: expected ')'", pos)
        self.advance()

    def parse(self, min_bp):
        kind, text, pos = self.advance()
        if kind == _NUM:
            left = Num(float(text))
        elif kind == _IDENT:
            left = self.parse_ident(text, pos)
        elif kind == _LPAREN:
            left = self.parse(0)
            self.expect_rparen()
        elif kind == _OP and text == "-":
            left = Neg(self.parse(_UNARY_BINDING))
        else:
            what = repr(text) if text else "end of input"
            raise ParseError(f"expected an operand, found {what}", pos)

        while True:
            kind, text, pos = self.peek()
            if kind != _OP:
                break
            bp = _BINDING[text]
            if bp <= min_bp:
                break
            self.advance()
            # ^ is right-associative: allow an equal-precedence operand on
            # the right by lowering the floor one notch
            rhs = self.parse(bp - 1 if text == "^" else bp)
            left = Bin(text, left, rhs)
        return left

    def parse_ident(self, name, pos):
        kind, _, _ = self.peek()
        if name in FUNCTIONS:
            if kind != _LPAREN:
                raise ParseError(f"function '{name}' requires parentheses", pos)
            self.advance()
            args = [self.parse(0)]
            while self.peek()[0] == _COMMA:
                self.advance()
                args.append(self.parse(0))
            self.expect_rparen()
            arity = FUNCTIONS[name]
            if len(args) != arity:
                raise ParseError(
                    f"function '{name}' expects {arity} argument(s), got {len(args)}",
                    pos,
                )
            return Call(name, tuple(args))
        if kind == _LPAREN:
            raise ParseError(f"unknown function '{name}'", pos)
        if not _valid_var(name):
            raise ParseError(f"unknown identifier '{name}'", pos)
        return Var(name)


def parse(src: str) -> Expr:
    """Parse an expression string into an AST."""
    parser = _Parser(_tokenize(src))
    ast = parser.parse(0)
    kind, text, pos = parser.peek()
    if kind == _RPAREN:
        raise ParseError("unbalanced parenthesis: unmatched ')'", pos)
    if kind != _END:
        raise ParseError(
            f"unexpected {text!r} after expression"
            " (implicit multiplication is not supported)",
            pos,
        )
    return ast


# --------------------------------------------------------------------------
# printing

_PREC_ADD, _PREC_MUL, _PREC_NEG, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


def _prec(node):
    if isinstance(node, Bin):
        return _PREC_ADD if node.op in "+-" else (_PREC_POW if node.op == "^" else _PREC_MUL)
    if isinstance(node, Neg):
        return _PREC_NEG
    if isinstance(node, Num) and (node.value < 0 or math.copysign(1.0, node.value) < 0):
        return _PREC_NEG  # folded negative literal prints like a unary minus
    return _PREC_ATOM


def to_string(node: Expr) -> str:
    """Render an AST so that parsing the result reproduces the tree."""
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        inner = to_string(node.arg)
        if _prec(node.arg) < _PREC_NEG:
            inner = f"({inner})"
        return "-" + inner
    if isinstance(node, Call):
        return f"{node.fn}({', '.join(to_string(a) for a in node.args)})"
    if isinstance(node, Bin):
        p = _prec(node)
        lhs, rhs = to_string(node.lhs), to_string(node.rhs)
        if node.op == "^":
            # right-associative: parenthesize an equal-precedence left child
            if _prec(node.lhs) <= p:
                lhs = f"({lhs})"
            if _prec(node.rhs) < p:
                rhs = f"({rhs})"
        else:
            if _prec(node.lhs) < p:
                lhs = f"({lhs})"
            if _prec(node.rhs) <= p:
                rhs = f"({rhs})"
        sep = f" {node.op} " if node.op in "+-" else node.op
        return f"{lhs}{sep}{rhs}"
    raise TypeError(f"not an expression node: {node!r}")


def variables(node: Expr) -> frozenset:
    """Names of all variables referenced by the expression."""
    out = set()
    stack = [node]
    while stack:
        cur = stack.pop()
        if isinstance(cur, Var):
            out.add(cur.name)
        elif isinstance(cur, Neg):
            stack.append(cur.arg)
        elif isinstance(cur, Bin):
            stack.append(cur.lhs)
            stack.append(cur.rhs)
        elif isinstance(cur, Call):
            stack.extend(cur.args)
    return frozenset(out)


# --------------------------------------------------------------------------
# compiled postfix programs

_LOAD, _CONST, _NEG_OP, _BIN_OP, _CALL_OP = range(5)

_BIN_FUNCS = {
    "+": np.add, "-": np.subtract, "*": np.multiply,
    "/": np.divide, "^": np.power,
}
_CALL_FUNCS = {
    "sin": np.sin, "cos": np.cos, "exp": np.exp, "log": np.log,
    "tanh": np.tanh, "abs": np.abs, "min": np.minimum, "max": np.maximum,
}


class Program:
    """Flat postfix form of one expression, bound to a slot layout.

    ``slots`` is the ordered tuple of variable names; ``run`` takes one
    value (scalar or ndarray) per slot, positionally.
    """

    def __init__(self, code, slots):
        self.code = code
        self.slots = tuple(slots)

    def run(self, values: Sequence):
        stack = []
        with np.errstate(all="ignore"):
            for op, arg in self.code:
                if op == _LOAD:
                    stack.append(values[arg])
                elif op == _CONST:
                    stack.append(arg)
                elif op == _NEG_OP:
                    stack.append(np.negative(stack.pop()))
                elif op == _BIN_OP:
                    rhs = stack.pop()
                    stack.append(arg(stack.pop(), rhs))
                else:
                    if len(arg) == 1:
                        stack.append(arg[0](stack.pop()))
                    else:
                        rhs = stack.pop()
                        stack.append(arg[0](stack.pop(), rhs))
        return stack[0]


def _emit(node, slot_of, code):
    if isinstance(node, Num):
        code.append((_CONST, node.value))
    elif isinstance(node, Var):
        try:
            code.append((_LOAD, slot_of[node.name]))
        except KeyError:
            raise EvalError(f"unbound variable '{node.name}'") from None
    elif isinstance(node, Neg):
        _emit(node.arg, slot_of, code)
        code.append((_NEG_OP, None))
    elif isinstance(node, Bin):
        _emit(node.lhs, slot_of, code)
        _emit(node.rhs, slot_of, code)
        code.append((_BIN_OP, _BIN_FUNCS[node.op]))
    elif isinstance(node, Call):
        for a in node.args:
            _emit(a, slot_of, code)
        code.append((_CALL_OP, (_CALL_FUNCS[node.fn],) + (None,) * (len(node.args) - 1)))
    else:
        raise TypeError(f"not an expression node: {node!r}")


@lru_cache(maxsize=4096)
def compile_program(node: Expr, slots: tuple) -> Program:
    """Compile to a postfix program over the given slot layout."""
    slot_of = {name: i for i, name in enumerate(slots)}
    code = []
    _emit(node, slot_of, code)
    return Program(tuple(code), slots)


def evaluate(node: Expr, env: Mapping):
    """Evaluate with IEEE semantics (domain errors yield nan/inf values).

    ``env`` maps variable names to scalars or broadcastable arrays; every
    variable appearing in the expression must be bound.
    """
    slots = tuple(sorted(variables(node)))
    prog = compile_program(node, slots)
    values = []
    for name in slots:
        try:
            values.append(env[name])
        except KeyError:
            raise EvalError(f"unbound variable '{name}'") from None
    out = prog.run(values)
    if np.ndim(out) == 0:
        return float(out)
    return out


# --------------------------------------------------------------------------
# differentiation (with light constant folding so simulators do not chew
# through towers of zero terms)


def _fold_num(value):
    return Num(float(value))


def _is_const(node, v):
    return isinstance(node, Num) and node.value == v


def _neg(a):
    if isinstance(a, Num):
        return _fold_num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def _add(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return _fold_num(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Bin("+", a, b)


def _sub(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return _fold_num(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return _neg(b)
    return Bin("-", a, b)


def _mul(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return _fold_num(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return _fold_num(0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    return Bin("*", a, b)


def _div(a, b):
    if isinstance(a, Num) and isinstance(b, Num) and b.value != 0.0:
        return _fold_num(a.value / b.value)
    if _is_const(a, 0.0) and not _is_const(b, 0.0):
        return _fold_num(0.0)
    if _is_const(b, 1.0):
        return a
    return Bin("/", a, b)


def _pow(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        try:
            return _fold_num(math.pow(a.value, b.value))
        except (ValueError, OverflowError):
            return Bin("^", a, b)
    if _is_const(b, 1.0):
        return a
    if _is_const(b, 0.0):
        return _fold_num(1.0)
    return Bin("^", a, b)


def differentiate(node: Expr, var: str) -> Expr:
    """Symbolic partial derivative with respect to a variable name.

    abs/min/max are rejected: the rank and Jacobian diagnostics need
    classical derivatives everywhere.
    """
    if isinstance(node, Num):
        return _fold_num(0.0)
    if isinstance(node, Var):
        return _fold_num(1.0 if node.name == var else 0.0)
    if isinstance(node, Neg):
        return _neg(differentiate(node.arg, var))
    if isinstance(node, Bin):
        a, b = node.lhs, node.rhs
        da, db = differentiate(a, var), differentiate(b, var)
        if node.op == "+":
            return _add(da, db)
        if node.op == "-":
            return _sub(da, db)
        if node.op == "*":
            return _add(_mul(da, b), _mul(a, db))
        if node.op == "/":
            return _div(_sub(_mul(da, b), _mul(a, db)), _pow(b, _fold_num(2.0)))
        # a^b: general rule a^b * (db*log(a) + b*da/a); constant exponents
        # take the polynomial shortcut to stay defined at a <= 0
        if isinstance(b, Num) and _is_const(db, 0.0):
            return _mul(_mul(b, _pow(a, _fold_num(b.value - 1.0))), da)
        return _mul(
            _pow(a, b),
            _add(_mul(db, Call("log", (a,))), _div(_mul(b, da), a)),
        )
    if isinstance(node, Call):
        if node.fn in ("abs", "min", "max"):
            raise DerivativeError(f"'{node.fn}' is not differentiable")
        (a,) = node.args
        da = differentiate(a, var)
        if node.fn == "sin":
            outer = Call("cos", (a,))
        elif node.fn == "cos":
            outer = _neg(Call("sin", (a,)))
        elif node.fn == "exp":
            outer = Call("exp", (a,))
        elif node.fn == "log":
            return _div(da, a)
        else:  # tanh
            outer = _sub(_fold_num(1.0), _pow(Call("tanh", (a,)), _fold_num(2.0)))
        return _mul(outer, da)
    raise TypeError(f"not an expression node: {node!r}")
