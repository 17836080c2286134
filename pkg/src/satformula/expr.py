"""Expression trees over spectral bands: parsing, printing, tokens.

Grammar accepted by :func:`parse` (EBNF)::

    expr    = term , { ("+" | "-") , term } ;
    term    = unary , { ("*" | "/") , unary } ;
    unary   = "-" , unary | primary ;
    primary = number | band | func , "(" , expr , ")" | "(" , expr , ")" ;
    func    = "exp" | "log" ;
    band    = "B" , [ "_" ] , digit1to8 ;
    number  = digits , [ "." , digits ] , [ ("e" | "E") , [ "+" | "-" ] , digits ] ;

Unary minus applied to a constant folds into the constant; applied to
anything else it becomes ``0.0 - x``. The typographic aliases ``×``, ``·``,
``÷`` and ``−`` are accepted for ``*``, ``*``, ``/`` and ``-``.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Iterator, Sequence, Union

import numpy as np

MAX_BANDS = 8
DEFAULT_MAX_LEN = 64


class OpKind(enum.Enum):
    ADD = ("+", 2)
    SUB = ("-", 2)
    MUL = ("*", 2)
    DIV = ("/", 2)
    EXP = ("exp", 1)
    LOG = ("log", 1)

    def __init__(self, symbol: str, arity: int):
        self.symbol = symbol
        self.arity = arity


@dataclass(frozen=True)
class Var:
    band: int  # 1-based

    def __post_init__(self):
        if not 1 <= self.band <= MAX_BANDS:
            raise ValueError(f"band index {self.band} outside 1..{MAX_BANDS}")


@dataclass(frozen=True)
class Const:
    value: float
    slot: int = 0


@dataclass(frozen=True)
class Op:
    kind: OpKind
    children: tuple

    def __post_init__(self):
        if len(self.children) != self.kind.arity:
            raise ArityError(
                f"{self.kind.name} takes {self.kind.arity} argument(s), got {len(self.children)}"
            )


Expr = Union[Var, Const, Op]


# -- errors -----------------------------------------------------------------


class ExprError(ValueError):
    pass


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} at byte offset {offset}"
        super().__init__(message)


class UnknownIdentifierError(ExprSyntaxError):
    pass


class ArityError(ExprSyntaxError):
    pass


class TokenSeqError(ExprError):
    pass


# -- traversal helpers --------------------------------------------------------


def walk(e: Expr) -> Iterator[Expr]:
    """Yield nodes in prefix (pre-order) order."""
    stack = [e]
    while stack:
        node = stack.pop()
        yield node
        if isinstance(node, Op):
            stack.extend(reversed(node.children))


def node_count(e: Expr) -> int:
    return sum(1 for _ in walk(e))


def depth(e: Expr) -> int:
    if isinstance(e, Op):
        return 1 + max(depth(c) for c in e.children)
    return 1


def constants(e: Expr) -> np.ndarray:
    """Constant values ordered by slot id."""
    consts = sorted((n.slot, n.value) for n in walk(e) if isinstance(n, Const))
    return np.array([v for _, v in consts], dtype=np.float64)


def n_constants(e: Expr) -> int:
    return sum(1 for n in walk(e) if isinstance(n, Const))


def bands_used(e: Expr) -> set[int]:
    return {n.band for n in walk(e) if isinstance(n, Var)}


def renumber_constants(e: Expr) -> Expr:
    """Reassign constant slots 0, 1, ... in prefix order."""
    counter = iter(range(1 << 30))

    def go(node):
        if isinstance(node, Const):
            return Const(node.value, next(counter))
        if isinstance(node, Op):
            return Op(node.kind, tuple(go(c) for c in node.children))
        return node

    return go(e)


def bind_constants(e: Expr, values: Sequence[float]) -> Expr:
    """Return ``e`` with constant slot ``i`` set to ``values[i]``."""
    values = [float(v) for v in values]
    if len(values) != n_constants(e):
        raise ValueError(f"expected {n_constants(e)} constants, got {len(values)}")

    def go(node):
        if isinstance(node, Const):
            return Const(values[node.slot], node.slot)
        if isinstance(node, Op):
            return Op(node.kind, tuple(go(c) for c in node.children))
        return node

    return go(e)


# -- printing -----------------------------------------------------------------


def _format_number(v: float) -> str:
    if not np.isfinite(v):
        raise ValueError(f"cannot print non-finite constant {v!r}")
    return repr(float(v))


def to_infix(e: Expr) -> str:
    """Fully parenthesized canonical infix form."""
    if isinstance(e, Var):
        return f"B{e.band}"
    if isinstance(e, Const):
        return _format_number(e.value)
    if e.kind.arity == 1:
        return f"{e.kind.symbol}({to_infix(e.children[0])})"
    left, right = e.children
    return f"({to_infix(left)} {e.kind.symbol} {to_infix(right)})"


print_expr = to_infix


# -- parsing ------------------------------------------------------------------

_ALIASES = {"×": "*", "·": "*", "÷": "/", "−": "-"}
_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<punct>[-+*/(),×·÷−])
    """,
    re.VERBOSE,
)
_BAND_RE = re.compile(r"B_?([1-9]\d*)$")
_FUNCS = {"exp": OpKind.EXP, "log": OpKind.LOG}
_BINARY = {"+": OpKind.ADD, "-": OpKind.SUB, "*": OpKind.MUL, "/": OpKind.DIV}


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = list(self._lex(text))
        self.pos = 0

    def _byte_offset(self, char_index: int) -> int:
        return len(self.text[:char_index].encode("utf-8"))

    def _lex(self, text):
        i = 0
        while i < len(text):
            m = _TOKEN_RE.match(text, i)
            if m is None:
                raise ExprSyntaxError(f"unexpected character {text[i]!r}", self._byte_offset(i))
            kind = m.lastgroup
            if kind != "ws":
                value = m.group()
                if kind == "punct":
                    value = _ALIASES.get(value, value)
                yield kind, value, i
            i = m.end()
        yield "end", "", len(text)

    def peek(self):
        return self.tokens[self.pos]

    def advance(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def error(self, message, tok, cls=ExprSyntaxError):
        return cls(message, self._byte_offset(tok[2]))

    def expect(self, value):
        tok = self.advance()
        if tok[1] != value or tok[0] == "end":
            found = "end of input" if tok[0] == "end" else repr(tok[1])
            raise self.error(f"expected {value!r}, found {found}", tok)
        return tok

    def parse(self) -> Expr:
        e = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise self.error(f"unexpected trailing token {tok[1]!r}", tok)
        return e

    def expr(self):
        left = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "punct":
            op = _BINARY[self.advance()[1]]
            left = Op(op, (left, self.term()))
        return left

    def term(self):
        left = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "punct":
            op = _BINARY[self.advance()[1]]
            left = Op(op, (left, self.unary()))
        return left

    def unary(self):
        tok = self.peek()
        if tok[0] == "punct" and tok[1] == "-":
            self.advance()
            operand = self.unary()
            if isinstance(operand, Const):
                return Const(-operand.value)
            return Op(OpKind.SUB, (Const(0.0), operand))
        return self.primary()

    def primary(self):
        tok = self.advance()
        kind, value, _ = tok
        if kind == "num":
            return Const(float(value))
        if kind == "ident":
            if value in _FUNCS:
                op = _FUNCS[value]
                self.expect("(")
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.advance()
                    args.append(self.expr())
                closing = self.peek()
                self.expect(")")
                if len(args) != op.arity:
                    raise self.error(
                        f"{value} takes {op.arity} argument(s), got {len(args)}", closing, ArityError
                    )
                return Op(op, tuple(args))
            m = _BAND_RE.match(value)
            if m and 1 <= int(m.group(1)) <= MAX_BANDS:
                return Var(int(m.group(1)))
            raise self.error(f"unknown identifier {value!r}", tok, UnknownIdentifierError)
        if kind == "punct" and value == "(":
            e = self.expr()
            self.expect(")")
            return e
        found = "end of input" if kind == "end" else repr(value)
        raise self.error(f"unexpected {found}", tok)


def parse(text: str) -> Expr:
    """Parse an infix formula such as ``"(B4 - B3) / (B4 + B3)"``."""
    return renumber_constants(_Parser(text).parse())


# -- token sequences ----------------------------------------------------------

PAD, BOS, EOS = 0, 1, 2
OP_TOKENS = {
    OpKind.ADD: 3,
    OpKind.SUB: 4,
    OpKind.MUL: 5,
    OpKind.DIV: 6,
    OpKind.EXP: 7,
    OpKind.LOG: 8,
}
BAND_TOKEN0 = 9  # B1 .. B8 -> 9 .. 16
CONST = 17
VOCAB_SIZE = 18
VOCAB_VERSION = 1

TOKEN_NAMES = ["PAD", "BOS", "EOS"] + [k.name.capitalize() for k in OP_TOKENS] + [
    f"B{i}" for i in range(1, MAX_BANDS + 1)
] + ["CONST"]
_TOKEN_OPS = {v: k for k, v in OP_TOKENS.items()}

TokenSeq = tuple  # tuple[int, ...], BOS ... EOS [PAD ...]


def token_arity(tok: int) -> int:
    """Arity of a body token; -1 for BOS/EOS/PAD."""
    if tok in _TOKEN_OPS:
        return _TOKEN_OPS[tok].arity
    if BAND_TOKEN0 <= tok < BAND_TOKEN0 + MAX_BANDS or tok == CONST:
        return 0
    return -1


def band_token(band: int) -> int:
    return BAND_TOKEN0 + band - 1


def to_tokens(e: Expr) -> TokenSeq:
    body = []
    for node in walk(e):
        if isinstance(node, Op):
            body.append(OP_TOKENS[node.kind])
        elif isinstance(node, Var):
            body.append(band_token(node.band))
        else:
            body.append(CONST)
    return (BOS, *body, EOS)


def strip_pad(tokens: Sequence[int]) -> TokenSeq:
    tokens = tuple(int(t) for t in tokens)
    end = len(tokens)
    while end and tokens[end - 1] == PAD:
        end -= 1
    return tokens[:end]


def check_tokens(tokens: Sequence[int], max_len: int = DEFAULT_MAX_LEN) -> TokenSeq:
    """Validate a prefix token sequence; returns it with PAD tail removed."""
    seq = strip_pad(tokens)
    if len(seq) > max_len:
        raise TokenSeqError(f"sequence length {len(seq)} exceeds max_len {max_len}")
    if not seq or seq[0] != BOS:
        raise TokenSeqError("sequence must start with BOS")
    need = 1
    for i, tok in enumerate(seq[1:], start=1):
        if tok == EOS:
            if need != 0:
                raise TokenSeqError(f"arity balance nonzero ({need}) at EOS, position {i}")
            if i != len(seq) - 1:
                raise TokenSeqError(f"trailing tokens after EOS at position {i}")
            return seq
        if need == 0:
            raise TokenSeqError(f"token after complete expression at position {i}")
        a = token_arity(tok)
        if a < 0:
            raise TokenSeqError(f"invalid token {tok} at position {i}")
        need += a - 1
    raise TokenSeqError("missing EOS")


def is_well_formed(tokens: Sequence[int], max_len: int = DEFAULT_MAX_LEN) -> bool:
    try:
        check_tokens(tokens, max_len)
    except TokenSeqError:
        return False
    return True


def from_tokens(tokens: Sequence[int], max_len: int = DEFAULT_MAX_LEN, fill: float = 1.0) -> Expr:
    """Rebuild an expression skeleton; every CONST becomes a fresh slot valued ``fill``."""
    seq = check_tokens(tokens, max_len)
    body = iter(seq[1:-1])

    def build():
        tok = next(body)
        if tok in _TOKEN_OPS:
            kind = _TOKEN_OPS[tok]
            return Op(kind, tuple(build() for _ in range(kind.arity)))
        if tok == CONST:
            return Const(fill)
        return Var(tok - BAND_TOKEN0 + 1)

    return renumber_constants(build())


def tokens_to_str(tokens: Sequence[int]) -> str:
    return " ".join(TOKEN_NAMES[t] for t in tokens)


# -- random generation ----------------------------------------------------------

_OPS = list(OpKind)


def random_expr(
    seed: int,
    max_depth: int,
    band_count: int,
    const_prob: float = 0.3,
    const_range: tuple[float, float] = (-5.0, 5.0),
) -> Expr:
    """Grow a random tree; leaf probability rises linearly to 1 at ``max_depth``."""
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    if not 1 <= band_count <= MAX_BANDS:
        raise ValueError(f"band_count must be in 1..{MAX_BANDS}")
    rng = np.random.default_rng(seed)

    def grow(d):
        if rng.random() < d / max_depth:
            if rng.random() < const_prob:
                return Const(float(rng.uniform(*const_range)))
            return Var(int(rng.integers(1, band_count + 1)))
        kind = _OPS[int(rng.integers(len(_OPS)))]
        return Op(kind, tuple(grow(d + 1) for _ in range(kind.arity)))

    return renumber_constants(grow(1))
