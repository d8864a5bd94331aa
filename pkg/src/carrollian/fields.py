"""Charts, the field expression language, and jet evaluation.

Grammar (standard precedence; ``^`` binds tightest and is right-associative,
then unary minus, then ``* /``, then ``+ -``)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | power
    power   := atom ('^' unary)?        # exponent must fold to an integer
    atom    := NUMBER | COORD | FUNC '(' expr ')' | '(' expr ')'

Fields compile to a stack tape (see :mod:`carrollian._tape`) that is
evaluated either for plain values or as truncated Taylor jets.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.stats import qmc

from . import _tape

FUNCTIONS = ("sin", "cos", "tan", "exp", "log", "sqrt", "tanh")

_FUNC_OPS = {
    "sin": _tape.OP_SIN,
    "cos": _tape.OP_COS,
    "tan": _tape.OP_TAN,
    "exp": _tape.OP_EXP,
    "log": _tape.OP_LOG,
    "sqrt": _tape.OP_SQRT,
    "tanh": _tape.OP_TANH,
}
_BIN_OPS = {"+": _tape.OP_ADD, "-": _tape.OP_SUB, "*": _tape.OP_MUL, "/": _tape.OP_DIV}

_IDENT = re.compile(r"[A-Za-z_][A-Za-z_0-9]*\Z")


class FieldError(ValueError):
    """Base class for expression and evaluation errors."""


class ParseError(FieldError):
    def __init__(self, message, text, offset):
        self.text = text
        self.offset = offset
        super().__init__(f"{message} at offset {offset} in {text!r}")


class FieldDomainError(FieldError, ArithmeticError):
    def __init__(self, reason, subexpr, point):
        self.reason = reason
        self.subexpr = subexpr
        self.point = point
        super().__init__(f"{reason} in subexpression {subexpr!r} at point {[float(v) for v in point]}")


# ---------------------------------------------------------------------------
# chart
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Chart:
    """Bounded coordinate box. ``dim == 0`` is the single-point chart."""

    coord_names: tuple
    lo: tuple
    hi: tuple

    def __post_init__(self):
        names = tuple(self.coord_names)
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        object.__setattr__(self, "coord_names", names)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if not (len(names) == len(lo) == len(hi)):
            raise ValueError("coord_names, lo and hi must have equal length")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate coordinate names in {names}")
        for name in names:
            if not _IDENT.match(name) or name in FUNCTIONS:
                raise ValueError(f"invalid coordinate name {name!r}")
        for name, a, b in zip(names, lo, hi):
            if not (math.isfinite(a) and math.isfinite(b) and a < b):
                raise ValueError(f"bounds for {name!r} must satisfy lo < hi, got [{a}, {b}]")

    @classmethod
    def box(cls, names, lo, hi):
        names = tuple(names)
        if np.isscalar(lo):
            lo = (lo,) * len(names)
        if np.isscalar(hi):
            hi = (hi,) * len(names)
        return cls(names, tuple(lo), tuple(hi))

    @property
    def dim(self):
        return len(self.coord_names)

    @property
    def lo_array(self):
        return np.array(self.lo, dtype=float)

    @property
    def hi_array(self):
        return np.array(self.hi, dtype=float)

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.hi_array - self.lo_array))

    @property
    def center(self):
        return 0.5 * (self.lo_array + self.hi_array)

    def index(self, name):
        return self.coord_names.index(name)

    def contains(self, x, slack=1e-12):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            return False
        w = slack * (self.hi_array - self.lo_array)
        return bool(np.all(x >= self.lo_array - w) and np.all(x <= self.hi_array + w))

    def check_point(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape != (self.dim,):
            raise ValueError(f"point has {x.size} coordinates, chart has {self.dim}")
        if not self.contains(x):
            raise ValueError(f"point {x.tolist()} lies outside the chart")
        return x

    def halton(self, count, seed, margin=1e-3):
        """Scrambled Halton points strictly inside the box (seeded)."""
        if count < 1:
            raise ValueError("count must be >= 1")
        if self.dim == 0:
            return np.zeros((count, 0))
        u = qmc.Halton(d=self.dim, scramble=True, seed=seed).random(count)
        u = margin + (1.0 - 2.0 * margin) * u
        return self.lo_array + u * (self.hi_array - self.lo_array)

    def edges(self, counts):
        """Per-axis cell boundaries for a grid with the given cell counts."""
        counts = _grid_counts(counts, self.dim)
        out = []
        for a, b, m in zip(self.lo, self.hi, counts):
            i = np.arange(m + 1, dtype=float)
            out.append(a + (b - a) * i / m)
        return out

    def cell_centers(self, counts):
        counts = _grid_counts(counts, self.dim)
        axes = [0.5 * (e[1:] + e[:-1]) for e in self.edges(counts)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1).reshape(tuple(counts) + (self.dim,))


def _grid_counts(counts, dim):
    if np.isscalar(counts):
        counts = (int(counts),) * dim
    counts = tuple(int(c) for c in counts)
    if len(counts) != dim:
        raise ValueError(f"grid needs {dim} counts, got {len(counts)}")
    return counts


# ---------------------------------------------------------------------------
# expression trees
# ---------------------------------------------------------------------------

PREC_ADD = 10
PREC_MUL = 20
PREC_NEG = 30
PREC_POW = 40
PREC_ATOM = 50


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str
    index: int


@dataclass(frozen=True)
class Neg:
    arg: object


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Pow:
    base: object
    exponent: int


@dataclass(frozen=True)
class Call:
    func: str
    arg: object


def _prec(node):
    if isinstance(node, BinOp):
        return PREC_ADD if node.op in "+-" else PREC_MUL
    if isinstance(node, Neg):
        return PREC_NEG
    if isinstance(node, Pow):
        return PREC_POW
    if isinstance(node, Num) and (node.value < 0 or math.copysign(1.0, node.value) < 0):
        return PREC_NEG
    return PREC_ATOM


def format_number(v):
    v = float(v)
    if v.is_integer() and abs(v) < 1e15 and not (v == 0 and math.copysign(1.0, v) < 0):
        return str(int(v))
    return repr(v)


def to_text(node):
    """Print a tree so that parsing the result rebuilds the same tree."""
    if isinstance(node, Num):
        return format_number(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.func}({to_text(node.arg)})"
    if isinstance(node, Neg):
        inner = to_text(node.arg)
        if _prec(node.arg) < PREC_POW:
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(node, Pow):
        base = to_text(node.base)
        if _prec(node.base) <= PREC_POW:
            base = f"({base})"
        return f"{base}^{node.exponent}"
    p = _prec(node)
    left = to_text(node.left)
    right = to_text(node.right)
    # left-associative: only the right operand needs parens at equal precedence
    if _prec(node.left) < p:
        left = f"({left})"
    if _prec(node.right) <= p:
        right = f"({right})"
    sep = " " if p == PREC_ADD else ""
    return f"{left}{sep}{node.op}{sep}{right}"


def free_vars(node):
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Num):
        return set()
    if isinstance(node, (Neg, Call)):
        return free_vars(node.arg)
    if isinstance(node, Pow):
        return free_vars(node.base)
    return free_vars(node.left) | free_vars(node.right)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)|(?P<id>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            bad = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ParseError(f"unexpected character {text[bad]!r}", text, bad)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text, chart):
        self.text = text
        self.chart = chart
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message, tok=None):
        tok = tok or self.peek()
        what = "end of input" if tok[0] == "end" else repr(tok[1])
        raise ParseError(f"{message} (found {what})", self.text, tok[2])

    def parse(self):
        node = self.expr()
        if self.peek()[0] != "end":
            self.error("unexpected token")
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        if self.peek() == ("op", "-", self.peek()[2]):
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            tok = self.peek()
            exponent = self.unary()
            value = _fold_constant(exponent)
            if value is None or not float(value).is_integer():
                raise ParseError("exponent must be an integer constant", self.text, tok[2])
            return Pow(base, int(value))
        return base

    def atom(self):
        tok = self.peek()
        kind, val, pos = tok
        if kind == "num":
            self.take()
            value = float(val)
            if not math.isfinite(value):
                raise ParseError("number out of range", self.text, pos)
            return Num(value)
        if kind == "id":
            self.take()
            nxt = self.peek()
            if nxt[0] == "op" and nxt[1] == "(":
                if val not in FUNCTIONS:
                    raise ParseError(f"unknown function {val!r}", self.text, pos)
                self.take()
                arg = self.expr()
                if self.peek()[1] != ")":
                    self.error("expected ')'")
                self.take()
                return Call(val, arg)
            if val in FUNCTIONS:
                raise ParseError(f"function {val!r} needs an argument", self.text, pos)
            if val not in self.chart.coord_names:
                raise ParseError(f"unknown identifier {val!r}", self.text, pos)
            return Var(val, self.chart.index(val))
        if kind == "op" and val == "(":
            self.take()
            node = self.expr()
            if self.peek()[1] != ")":
                self.error("expected ')'")
            self.take()
            return node
        self.error("expected a number, coordinate, function or '('")


def _fold_constant(node):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Neg):
        v = _fold_constant(node.arg)
        return None if v is None else -v
    if isinstance(node, Pow):
        v = _fold_constant(node.base)
        return None if v is None or (v == 0 and node.exponent < 0) else v ** node.exponent
    return None


def parse_expr(text, chart):
    if not isinstance(text, str) or not text.strip():
        raise ParseError("empty expression", str(text), 0)
    return _Parser(text, chart).parse()


# ---------------------------------------------------------------------------
# symbolic derivative (used only to build structure functions of presets)
# ---------------------------------------------------------------------------


def _is_num(node, v=None):
    return isinstance(node, Num) and (v is None or node.value == v)


def _add(a, b):
    if _is_num(a, 0.0):
        return b
    if _is_num(b, 0.0):
        return a
    if _is_num(a) and _is_num(b):
        return Num(a.value + b.value)
    return BinOp("+", a, b)


def _sub(a, b):
    if _is_num(b, 0.0):
        return a
    if _is_num(a, 0.0):
        return _neg(b)
    if _is_num(a) and _is_num(b):
        return Num(a.value - b.value)
    return BinOp("-", a, b)


def _neg(a):
    if _is_num(a):
        return Num(-a.value) if a.value != 0 else Num(0.0)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def _mul(a, b):
    if _is_num(a, 0.0) or _is_num(b, 0.0):
        return Num(0.0)
    if _is_num(a, 1.0):
        return b
    if _is_num(b, 1.0):
        return a
    if _is_num(a) and _is_num(b):
        return Num(a.value * b.value)
    if _is_num(a, -1.0):
        return _neg(b)
    if _is_num(b, -1.0):
        return _neg(a)
    return BinOp("*", a, b)


def _div(a, b):
    if _is_num(a, 0.0):
        return Num(0.0)
    if _is_num(b, 1.0):
        return a
    return BinOp("/", a, b)


def _pow(a, p):
    if p == 0:
        return Num(1.0)
    if p == 1:
        return a
    return Pow(a, p)


def differentiate(node, index):
    """d(node)/d(coordinate index) as a new tree, with trivial folding."""
    d = lambda n: differentiate(n, index)  # noqa: E731
    if isinstance(node, Num):
        return Num(0.0)
    if isinstance(node, Var):
        return Num(1.0 if node.index == index else 0.0)
    if isinstance(node, Neg):
        return _neg(d(node.arg))
    if isinstance(node, BinOp):
        a, b = node.left, node.right
        if node.op == "+":
            return _add(d(a), d(b))
        if node.op == "-":
            return _sub(d(a), d(b))
        if node.op == "*":
            return _add(_mul(d(a), b), _mul(a, d(b)))
        # (a/b)' = a'/b - a b'/b^2
        return _sub(_div(d(a), b), _div(_mul(a, d(b)), _pow(b, 2)))
    if isinstance(node, Pow):
        p = node.exponent
        return _mul(_mul(Num(float(p)), _pow(node.base, p - 1)), d(node.base))
    u = node.arg
    du = d(u)
    if _is_num(du, 0.0):
        return Num(0.0)
    f = node.func
    if f == "sin":
        outer = Call("cos", u)
    elif f == "cos":
        outer = _neg(Call("sin", u))
    elif f == "tan":
        outer = _add(Num(1.0), _pow(Call("tan", u), 2))
    elif f == "exp":
        outer = node
    elif f == "log":
        return _div(du, u)
    elif f == "sqrt":
        return _div(du, _mul(Num(2.0), node))
    else:
        outer = _sub(Num(1.0), _pow(node, 2))
    return _mul(outer, du)


# ---------------------------------------------------------------------------
# compilation
# ---------------------------------------------------------------------------


def _emit(node, ops, args, consts, texts):
    if isinstance(node, Num):
        consts.append(node.value)
        ops.append(_tape.OP_CONST)
        args.append(len(consts) - 1)
    elif isinstance(node, Var):
        ops.append(_tape.OP_VAR)
        args.append(node.index)
    elif isinstance(node, Neg):
        _emit(node.arg, ops, args, consts, texts)
        ops.append(_tape.OP_NEG)
        args.append(0)
    elif isinstance(node, BinOp):
        _emit(node.left, ops, args, consts, texts)
        _emit(node.right, ops, args, consts, texts)
        ops.append(_BIN_OPS[node.op])
        args.append(0)
    elif isinstance(node, Pow):
        _emit(node.base, ops, args, consts, texts)
        ops.append(_tape.OP_POW)
        args.append(node.exponent)
    elif isinstance(node, Call):
        _emit(node.arg, ops, args, consts, texts)
        ops.append(_FUNC_OPS[node.func])
        args.append(0)
    else:  # pragma: no cover
        raise TypeError(f"not an expression node: {node!r}")
    texts.append(node)


class Program:
    """Several fields compiled into one tape over a shared chart."""

    def __init__(self, fields, chart):
        self.chart = chart
        self.nout = len(fields)
        ops, args, consts, nodes = [], [], [], []
        for slot, f in enumerate(fields):
            if f.chart.coord_names != chart.coord_names:
                raise ValueError("all fields of a program must share the chart coordinates")
            _emit(f.node, ops, args, consts, nodes)
            ops.append(_tape.OP_STORE)
            args.append(slot)
            nodes.append(None)
        self.ops = np.array(ops, dtype=np.int64)
        self.args = np.array(args, dtype=np.int64)
        self.consts = np.array(consts if consts else [0.0], dtype=float)
        self._nodes = nodes

    def _raise(self, status, pc, x):
        node = self._nodes[pc] if 0 <= pc < len(self._nodes) else None
        text = to_text(node) if node is not None else "?"
        raise FieldDomainError(_tape.ERROR_TEXT.get(status, "evaluation error"), text, x)

    def values(self, x):
        x = np.ascontiguousarray(x, dtype=float).reshape(-1)
        out = np.empty(self.nout)
        status, pc = _tape.eval_values(self.ops, self.args, self.consts, x, out)
        if status != _tape.ERR_OK:
            self._raise(status, pc, x)
        return out

    def values_batch(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            X = X.reshape(-1, self.chart.dim) if self.chart.dim else X.reshape(1, 0)
        out, status, pc, row = _tape.batch_values(self.ops, self.args, self.consts, self.nout, X)
        if status != _tape.ERR_OK:
            self._raise(status, pc, X[row])
        return out

    def jets(self, x, order=2):
        """Return [values, grads, hessians, third derivatives][: order + 1]."""
        if not 0 <= order <= 3:
            raise ValueError("jet order must be between 0 and 3")
        x = np.ascontiguousarray(x, dtype=float).reshape(-1)
        n = self.chart.dim
        m = self.nout
        ov = np.zeros(m)
        og = np.zeros((m, n))
        oh = np.zeros((m, n, n))
        ot = np.zeros((m, n, n, n)) if order >= 3 else np.zeros((m, 0, 0, 0))
        status, pc = _tape.eval_jets(self.ops, self.args, self.consts, n, order, x, ov, og, oh, ot)
        if status != _tape.ERR_OK:
            self._raise(status, pc, x)
        return [ov, og, oh, ot][: order + 1]


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Jet2:
    value: float
    grad: np.ndarray
    hess: np.ndarray


class ScalarField:
    """Immutable smooth function of the chart coordinates."""

    __slots__ = ("node", "chart", "__dict__")

    def __init__(self, node, chart):
        self.node = node
        self.chart = chart

    @classmethod
    def constant(cls, value, chart):
        return cls(Num(float(value)), chart)

    @cached_property
    def text(self):
        return to_text(self.node)

    @cached_property
    def program(self):
        return Program([self], self.chart)

    @property
    def is_zero(self):
        return _is_num(self.node, 0.0)

    @property
    def is_constant(self):
        return not free_vars(self.node)

    def __repr__(self):
        return f"ScalarField({self.text!r})"

    def __call__(self, x):
        return float(self.program.values(x)[0])

    def jet(self, x):
        v, g, h = self.program.jets(x, 2)
        return Jet2(float(v[0]), g[0].copy(), h[0].copy())

    def derivative(self, coord):
        i = coord if isinstance(coord, int) else self.chart.index(coord)
        return ScalarField(differentiate(self.node, i), self.chart)

    def _lift(self, other):
        if isinstance(other, ScalarField):
            return other.node
        return Num(float(other))

    def __add__(self, other):
        return ScalarField(_add(self.node, self._lift(other)), self.chart)

    __radd__ = __add__

    def __sub__(self, other):
        return ScalarField(_sub(self.node, self._lift(other)), self.chart)

    def __rsub__(self, other):
        return ScalarField(_sub(self._lift(other), self.node), self.chart)

    def __mul__(self, other):
        return ScalarField(_mul(self.node, self._lift(other)), self.chart)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return ScalarField(_div(self.node, self._lift(other)), self.chart)

    def __neg__(self):
        return ScalarField(_neg(self.node), self.chart)


def parse_field(text, chart):
    """Parse an expression string into a :class:`ScalarField` on ``chart``."""
    return ScalarField(parse_expr(text, chart), chart)


def as_field(value, chart):
    """Accept a field, an expression string or a number."""
    if isinstance(value, ScalarField):
        return value
    if isinstance(value, str):
        return parse_field(value, chart)
    return ScalarField.constant(value, chart)


def jet(field, point):
    """Value, gradient and Hessian of ``field`` at ``point`` (Taylor carriers)."""
    x = field.chart.check_point(point)
    return field.jet(x)
