"""String-transformation DSL: AST, canonical text form, parser, interpreter.

A program is a concatenation of 1..10 expressions. Expressions either emit a
constant character, extract a substring (by position, by token span, or by
token occurrence), or rewrite a string (case change, delimiter replacement,
trim); one level of composition applies a rewriting/extracting operator to the
value of an inner extractor.

Canonical text form: expressions joined by " | ", each expression rendered as
an underscore-joined constructor, e.g.

    GetToken_PROP_CASE_2 | Const( ) | GetToken_ALL_CAPS_1
    GetToken_NUMBER_1 | Const(.) | Replace_ _.(SubStr(-8, -1))

Token classes are matched by maximal munch, left to right, non-overlapping.
Expressions that are undefined on an input (missing occurrence, empty or
inverted span) raise ExecError rather than yielding an empty string.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Union

from lpsynth import spanscan

# Grammar domains.
DELIMITERS = "&,.?@()[]%{}/:;$#\"' "
UPPER = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
LOWER_CHARS = UPPER.lower()
DIGITS = "0123456789"
CHARSET = UPPER + LOWER_CHARS + DIGITS + DELIMITERS

POSITION_MIN, POSITION_MAX = -100, 100
INDEX_MAX = 5
MAX_EXPRESSIONS = 10

INDICES = tuple(range(-INDEX_MAX, 0)) + tuple(range(1, INDEX_MAX + 1))
POSITIONS = tuple(range(POSITION_MIN, 0)) + tuple(range(1, POSITION_MAX + 1))


class TypeToken(enum.Enum):
    NUMBER = "NUMBER"
    WORD = "WORD"
    ALPHANUM = "ALPHANUM"
    ALL_CAPS = "ALL_CAPS"
    PROP_CASE = "PROP_CASE"
    LOWER = "LOWER"
    DIGIT = "DIGIT"
    CHAR = "CHAR"


class CaseKind(enum.Enum):
    PROPER = "PROPER"
    ALL_CAPS = "ALL_CAPS"
    LOWER = "LOWER"


class Boundary(enum.Enum):
    START = "START"
    END = "END"


# A regex token is a token class or a single delimiter character.
RegexToken = Union[TypeToken, str]

_SCAN_CLASS = {
    TypeToken.NUMBER: spanscan.CLS_NUMBER,
    TypeToken.WORD: spanscan.CLS_WORD,
    TypeToken.ALPHANUM: spanscan.CLS_ALPHANUM,
    TypeToken.ALL_CAPS: spanscan.CLS_ALL_CAPS,
    TypeToken.PROP_CASE: spanscan.CLS_PROP_CASE,
    TypeToken.LOWER: spanscan.CLS_LOWER,
    TypeToken.DIGIT: spanscan.CLS_DIGIT,
    TypeToken.CHAR: spanscan.CLS_CHAR,
}

# Toy dialect restrictions.
TOY_TYPES = (TypeToken.NUMBER, TypeToken.WORD, TypeToken.ALPHANUM)
TOY_DELIMITERS = "&,. "
TOY_INDICES = (-1, 1, 2)

DIALECTS = ("full", "toy")


class ExecError(Exception):
    """An expression is undefined on the given input."""

    def __init__(self, reason: str, expression_index: int | None = None):
        self.reason = reason
        self.expression_index = expression_index
        at = "" if expression_index is None else f" (expression {expression_index})"
        super().__init__(f"{reason}{at}")


class ParseError(Exception):
    """Program text does not match the grammar."""

    def __init__(self, position: int, reason: str):
        self.position = position
        self.reason = reason
        super().__init__(f"at {position}: {reason}")


class DialectError(Exception):
    """A well-formed program lies outside the configured dialect."""


@dataclass(frozen=True)
class ConstStr:
    char: str


@dataclass(frozen=True)
class SubStr:
    k1: int
    k2: int


@dataclass(frozen=True)
class GetSpan:
    r1: RegexToken
    i1: int
    b1: Boundary
    r2: RegexToken
    i2: int
    b2: Boundary


@dataclass(frozen=True)
class GetToken:
    t: TypeToken
    i: int


@dataclass(frozen=True)
class ToCase:
    kind: CaseKind


@dataclass(frozen=True)
class Replace:
    d1: str
    d2: str


@dataclass(frozen=True)
class Trim:
    pass


@dataclass(frozen=True)
class GetUpto:
    r: RegexToken


@dataclass(frozen=True)
class GetFrom:
    r: RegexToken


@dataclass(frozen=True)
class GetFirst:
    t: TypeToken
    i: int


@dataclass(frozen=True)
class GetAll:
    t: TypeToken


NestingOp = Union[GetToken, ToCase, Replace, Trim, GetUpto, GetFrom, GetFirst, GetAll]
Substring = Union[SubStr, GetSpan]


@dataclass(frozen=True)
class Compose:
    outer: NestingOp
    inner: Union[NestingOp, SubStr, GetSpan]


Expression = Union[ConstStr, SubStr, GetSpan, NestingOp, Compose]

NESTING_TYPES = (GetToken, ToCase, Replace, Trim, GetUpto, GetFrom, GetFirst, GetAll)


@dataclass(frozen=True)
class Program:
    expressions: tuple[Expression, ...]

    def __post_init__(self):
        if not 1 <= len(self.expressions) <= MAX_EXPRESSIONS:
            raise ValueError(
                f"program must have 1..{MAX_EXPRESSIONS} expressions, "
                f"got {len(self.expressions)}"
            )


# ---------------------------------------------------------------------------
# Span matching and interpretation


def match_spans(s: str, r: RegexToken) -> list[tuple[int, int]]:
    """Spans of regex token `r` in `s`: maximal munch, non-overlapping.

    Delimiters match each single occurrence of the character.
    """
    if isinstance(r, TypeToken):
        return spanscan.scan_class(s, _SCAN_CLASS[r])
    return spanscan.scan_delimiter(s, r)


def _occurrence(spans: list[tuple[int, int]], i: int, r: RegexToken) -> tuple[int, int]:
    # i is 1-based; negative counts from the end.
    idx = i - 1 if i > 0 else len(spans) + i
    if not 0 <= idx < len(spans):
        raise ExecError(
            f"occurrence {i} of {_regex_name(r)} not found ({len(spans)} present)"
        )
    return spans[idx]


def _ascii_upper(s: str) -> str:
    return "".join(chr(ord(c) - 32) if "a" <= c <= "z" else c for c in s)


def _ascii_lower(s: str) -> str:
    return "".join(chr(ord(c) + 32) if "A" <= c <= "Z" else c for c in s)


def _regex_name(r: RegexToken) -> str:
    return r.value if isinstance(r, TypeToken) else repr(r)


def _value(e: Expression, s: str) -> str:
    if isinstance(e, ConstStr):
        return e.char
    if isinstance(e, SubStr):
        n = len(s)
        if n == 0:
            raise ExecError("substring of empty input")
        p1 = e.k1 if e.k1 > 0 else n + e.k1 + 1
        p2 = e.k2 if e.k2 > 0 else n + e.k2 + 1
        p1 = min(max(p1, 1), n)
        p2 = min(max(p2, 1), n)
        if p1 > p2:
            raise ExecError(f"inverted substring [{e.k1}, {e.k2}] on length {n}")
        return s[p1 - 1 : p2]
    if isinstance(e, GetSpan):
        sp1 = _occurrence(match_spans(s, e.r1), e.i1, e.r1)
        sp2 = _occurrence(match_spans(s, e.r2), e.i2, e.r2)
        pos1 = sp1[0] if e.b1 is Boundary.START else sp1[1]
        pos2 = sp2[0] if e.b2 is Boundary.START else sp2[1]
        if pos1 >= pos2:
            raise ExecError(f"empty or inverted span [{pos1}, {pos2})")
        return s[pos1:pos2]
    if isinstance(e, GetToken):
        a, b = _occurrence(match_spans(s, e.t), e.i, e.t)
        return s[a:b]
    if isinstance(e, ToCase):
        if e.kind is CaseKind.ALL_CAPS:
            return _ascii_upper(s)
        if e.kind is CaseKind.LOWER:
            return _ascii_lower(s)
        # PROPER: uppercase the first letter of each WORD token, lowercase the rest.
        out = list(s)
        for a, b in match_spans(s, TypeToken.WORD):
            out[a] = _ascii_upper(s[a])
            out[a + 1 : b] = _ascii_lower(s[a + 1 : b])
        return "".join(out)
    if isinstance(e, Replace):
        return s.replace(e.d1, e.d2)
    if isinstance(e, Trim):
        return s.strip(" ")
    if isinstance(e, GetUpto):
        spans = match_spans(s, e.r)
        if not spans:
            raise ExecError(f"no occurrence of {_regex_name(e.r)}")
        return s[: spans[0][1]]
    if isinstance(e, GetFrom):
        spans = match_spans(s, e.r)
        if not spans:
            raise ExecError(f"no occurrence of {_regex_name(e.r)}")
        res = s[spans[0][1] :]
        if not res:
            raise ExecError(f"nothing after first {_regex_name(e.r)}")
        return res
    if isinstance(e, GetFirst):
        if e.i < 0:
            raise ExecError(f"GetFirst with negative count {e.i}")
        spans = match_spans(s, e.t)
        if len(spans) < e.i:
            raise ExecError(f"fewer than {e.i} occurrences of {e.t.value}")
        return " ".join(s[a:b] for a, b in spans[: e.i])
    if isinstance(e, GetAll):
        spans = match_spans(s, e.t)
        if not spans:
            raise ExecError(f"no occurrence of {e.t.value}")
        return " ".join(s[a:b] for a, b in spans)
    if isinstance(e, Compose):
        return _value(e.outer, _value(e.inner, s))
    raise TypeError(f"not an expression: {e!r}")


def execute(program: Program, s: str) -> str:
    """Run `program` on input `s`; ExecError carries the failing expression index."""
    parts = []
    for idx, e in enumerate(program.expressions):
        try:
            parts.append(_value(e, s))
        except ExecError as err:
            raise ExecError(err.reason, expression_index=idx) from None
    return "".join(parts)


def is_consistent(program: Program, inputs: list[str], outputs: list[str]) -> bool:
    """True iff the program maps every input to its output; ExecError counts as no."""
    if len(inputs) != len(outputs):
        raise ValueError("inputs and outputs differ in length")
    for inp, out in zip(inputs, outputs):
        try:
            if execute(program, inp) != out:
                return False
        except ExecError:
            return False
    return True


# ---------------------------------------------------------------------------
# Rendering


def render_regex(r: RegexToken) -> str:
    return r.value if isinstance(r, TypeToken) else r


def render_expression(e: Expression) -> str:
    if isinstance(e, ConstStr):
        return f"Const({e.char})"
    if isinstance(e, SubStr):
        return f"SubStr({e.k1}, {e.k2})"
    if isinstance(e, GetSpan):
        if e.b1 is Boundary.START and e.b2 is Boundary.END:
            return (
                f"GetSpan_{render_regex(e.r1)}_{e.i1}_{render_regex(e.r2)}_{e.i2}"
            )
        return (
            f"GetSpan_{render_regex(e.r1)}_{e.i1}_{e.b1.value}"
            f"_{render_regex(e.r2)}_{e.i2}_{e.b2.value}"
        )
    if isinstance(e, GetToken):
        return f"GetToken_{e.t.value}_{e.i}"
    if isinstance(e, ToCase):
        return f"ToCase_{e.kind.value}"
    if isinstance(e, Replace):
        return f"Replace_{e.d1}_{e.d2}"
    if isinstance(e, Trim):
        return "Trim"
    if isinstance(e, GetUpto):
        return f"GetUpto_{render_regex(e.r)}"
    if isinstance(e, GetFrom):
        return f"GetFrom_{render_regex(e.r)}"
    if isinstance(e, GetFirst):
        return f"GetFirst_{e.t.value}_{e.i}"
    if isinstance(e, GetAll):
        return f"GetAll_{e.t.value}"
    if isinstance(e, Compose):
        return f"{render_expression(e.outer)}({render_expression(e.inner)})"
    raise TypeError(f"not an expression: {e!r}")


def render_program(p: Program) -> str:
    """Canonical text form; `parse_program` is its exact inverse."""
    return " | ".join(render_expression(e) for e in p.expressions)


# ---------------------------------------------------------------------------
# Parsing

_TYPE_NAMES = tuple(t.value for t in TypeToken)
_BOUNDARY_NAMES = ("START", "END")
_CASE_NAMES = tuple(k.value for k in CaseKind)


class _Parser:
    """Strict recursive-descent parser over the canonical text form."""

    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, reason: str) -> ParseError:
        return ParseError(self.pos, reason)

    def eof(self) -> bool:
        return self.pos >= len(self.text)

    def peek(self, lit: str) -> bool:
        return self.text.startswith(lit, self.pos)

    def expect(self, lit: str) -> None:
        if not self.peek(lit):
            raise self.error(f"expected {lit!r}")
        self.pos += len(lit)

    def take_char(self, domain: str, what: str) -> str:
        if self.eof() or self.text[self.pos] not in domain:
            raise self.error(f"expected {what}")
        c = self.text[self.pos]
        self.pos += 1
        return c

    def parse_int(self, lo: int, hi: int, nonzero: bool = True) -> int:
        start = self.pos
        if self.peek("-"):
            self.pos += 1
        while not self.eof() and "0" <= self.text[self.pos] <= "9":
            self.pos += 1
        lit = self.text[start : self.pos]
        if not lit or lit == "-":
            self.pos = start
            raise self.error("expected integer")
        val = int(lit)
        if not lo <= val <= hi or (nonzero and val == 0):
            self.pos = start
            raise self.error(f"integer {val} outside [{lo}, {hi}] \\ {{0}}")
        return val

    def parse_type(self) -> TypeToken:
        for name in _TYPE_NAMES:
            if self.peek(name):
                self.pos += len(name)
                return TypeToken(name)
        raise self.error("expected token class")

    def parse_regex(self) -> RegexToken:
        for name in _TYPE_NAMES:
            if self.peek(name):
                self.pos += len(name)
                return TypeToken(name)
        return self.take_char(DELIMITERS, "token class or delimiter")

    def parse_case(self) -> CaseKind:
        for name in _CASE_NAMES:
            if self.peek(name):
                self.pos += len(name)
                return CaseKind(name)
        raise self.error("expected case kind")

    def parse_boundary(self) -> Boundary:
        # Checked longest-first so "END" never shadows a future name.
        for name in _BOUNDARY_NAMES:
            if self.peek(name):
                self.pos += len(name)
                return Boundary(name)
        raise self.error("expected boundary")

    def at_boundary(self) -> bool:
        return self.peek("START") or self.peek("END")

    def parse_index(self) -> int:
        return self.parse_int(-INDEX_MAX, INDEX_MAX)

    def parse_getspan(self) -> GetSpan:
        self.expect("GetSpan_")
        r1 = self.parse_regex()
        self.expect("_")
        i1 = self.parse_index()
        self.expect("_")
        if self.at_boundary():
            b1 = self.parse_boundary()
            self.expect("_")
            r2 = self.parse_regex()
            self.expect("_")
            i2 = self.parse_index()
            self.expect("_")
            b2 = self.parse_boundary()
            return GetSpan(r1, i1, b1, r2, i2, b2)
        r2 = self.parse_regex()
        self.expect("_")
        i2 = self.parse_index()
        return GetSpan(r1, i1, Boundary.START, r2, i2, Boundary.END)

    def parse_substr(self) -> SubStr:
        self.expect("SubStr(")
        k1 = self.parse_int(POSITION_MIN, POSITION_MAX)
        self.expect(", ")
        k2 = self.parse_int(POSITION_MIN, POSITION_MAX)
        self.expect(")")
        return SubStr(k1, k2)

    def parse_nesting(self) -> NestingOp:
        if self.peek("GetToken_"):
            self.pos += len("GetToken_")
            t = self.parse_type()
            self.expect("_")
            return GetToken(t, self.parse_index())
        if self.peek("ToCase_"):
            self.pos += len("ToCase_")
            return ToCase(self.parse_case())
        if self.peek("Replace_"):
            self.pos += len("Replace_")
            d1 = self.take_char(DELIMITERS, "delimiter")
            self.expect("_")
            d2 = self.take_char(DELIMITERS, "delimiter")
            return Replace(d1, d2)
        if self.peek("Trim"):
            self.pos += len("Trim")
            return Trim()
        if self.peek("GetUpto_"):
            self.pos += len("GetUpto_")
            return GetUpto(self.parse_regex())
        if self.peek("GetFrom_"):
            self.pos += len("GetFrom_")
            return GetFrom(self.parse_regex())
        if self.peek("GetFirst_"):
            self.pos += len("GetFirst_")
            t = self.parse_type()
            self.expect("_")
            return GetFirst(t, self.parse_index())
        if self.peek("GetAll_"):
            self.pos += len("GetAll_")
            return GetAll(self.parse_type())
        raise self.error("expected expression")

    def parse_expression(self) -> Expression:
        if self.peek("Const("):
            self.pos += len("Const(")
            c = self.take_char(CHARSET, "constant character")
            self.expect(")")
            return ConstStr(c)
        if self.peek("SubStr("):
            return self.parse_substr()
        if self.peek("GetSpan_"):
            return self.parse_getspan()
        op = self.parse_nesting()
        if self.peek("("):
            self.pos += 1
            if self.peek("SubStr("):
                inner: Expression = self.parse_substr()
            elif self.peek("GetSpan_"):
                inner = self.parse_getspan()
            else:
                inner = self.parse_nesting()
                if self.peek("("):
                    raise self.error("nesting deeper than one level")
            self.expect(")")
            return Compose(op, inner)
        return op

    def parse_program(self) -> Program:
        expressions = [self.parse_expression()]
        while not self.eof():
            self.expect(" | ")
            expressions.append(self.parse_expression())
        if len(expressions) > MAX_EXPRESSIONS:
            raise ParseError(0, f"more than {MAX_EXPRESSIONS} expressions")
        return Program(tuple(expressions))


def validate_dialect(p: Program, dialect: str) -> None:
    """Raise DialectError if `p` is outside `dialect` ("full" accepts anything)."""
    if dialect not in DIALECTS:
        raise ValueError(f"unknown dialect {dialect!r}")
    if dialect == "full":
        return
    for e in p.expressions:
        if not isinstance(e, GetSpan):
            raise DialectError(f"toy dialect is GetSpan-only, got {render_expression(e)}")
        for r in (e.r1, e.r2):
            ok = r in TOY_TYPES if isinstance(r, TypeToken) else r in TOY_DELIMITERS
            if not ok:
                raise DialectError(f"regex token {render_regex(r)!r} not in toy dialect")
        if e.i1 not in TOY_INDICES or e.i2 not in TOY_INDICES:
            raise DialectError(f"index outside toy domain in {render_expression(e)}")
        if e.b1 is not Boundary.START or e.b2 is not Boundary.END:
            raise DialectError("toy spans run from a START boundary to an END boundary")


def parse_program(text: str, dialect: str = "full") -> Program:
    """Parse canonical text; strict. ParseError carries the failing position."""
    parser = _Parser(text)
    try:
        program = parser.parse_program()
    except ValueError as err:
        raise ParseError(parser.pos, str(err)) from None
    validate_dialect(program, dialect)
    return program
