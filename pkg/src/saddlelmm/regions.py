"""Region predicates over ``(x1, x2)`` used to seed initial directions.

Grammar (whitespace ignored)::

    region  := or ('or' and)*
    and     := cmp (('&' | ',' | 'and') cmp)*
    cmp     := 'not' cmp | arith OP arith | '(' region ')'
    arith   := term (('+' | '-') term)*
    term    := unary (('*' | '/' | <juxtaposition>) unary)*
    unary   := '-' unary | power
    power   := atom (('^' | '**') unary)?
    atom    := NUMBER | 'x1' | 'x2' | '(' arith ')' | '|' arith '|' | '|x|'

``OP`` is one of ``< > <= >=``.  The keywords ``Omega``/``all`` and
``empty``/``none`` denote the whole domain and the empty set.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["Region", "RegionSyntaxError", "parse_region", "WHOLE", "EMPTY"]


class RegionSyntaxError(ValueError):
    pass


_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?|\d+(?:[eE][-+]?\d+)?)"
    r"|(?P<name>x1|x2|x|and|or|not)"
    r"|(?P<op><=|>=|\*\*|[<>+\-*/^()|&,]))"
)

_WHOLE_WORDS = {"omega", "all", "Ω", "whole"}
_EMPTY_WORDS = {"empty", "none", "∅", "{}"}


def _tokenize(text: str) -> list[tuple[str, str]]:
    pos, out = 0, []
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise RegionSyntaxError(f"unexpected character {text[pos]!r} at {pos} in {text!r}")
        kind = m.lastgroup
        out.append((kind, m.group(kind)))
        pos = m.end()
    return out


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.pos = 0
        self.in_abs = 0

    def peek(self):
        return self.toks[self.pos] if self.pos < len(self.toks) else (None, None)

    def take(self, value=None):
        kind, val = self.peek()
        if kind is None or (value is not None and val != value):
            raise RegionSyntaxError(f"expected {value or 'token'} at token {self.pos} in {self.text!r}")
        self.pos += 1
        return val

    def error(self, msg):
        return RegionSyntaxError(f"{msg} (token {self.pos} in {self.text!r})")

    # boolean layer
    def region(self):
        left = self.conj()
        while self.peek()[1] == "or":
            self.take()
            right = self.conj()
            left = (lambda a, b: lambda x1, x2: a(x1, x2) | b(x1, x2))(left, right)
        return left

    def conj(self):
        left = self.comparison()
        while self.peek()[1] in ("&", ",", "and"):
            self.take()
            right = self.comparison()
            left = (lambda a, b: lambda x1, x2: a(x1, x2) & b(x1, x2))(left, right)
        return left

    def comparison(self):
        if self.peek()[1] == "not":
            self.take()
            inner = self.comparison()
            return lambda x1, x2: ~inner(x1, x2)
        start = self.pos
        try:
            lhs = self.arith()
            op = self.peek()[1]
            if op not in ("<", ">", "<=", ">="):
                raise self.error("expected comparison")
        except RegionSyntaxError:
            self.pos = start
            if self.peek()[1] != "(":
                raise
            self.take("(")
            inner = self.region()
            self.take(")")
            return inner
        self.take()
        rhs = self.arith()
        cmp = {
            "<": np.less,
            ">": np.greater,
            "<=": np.less_equal,
            ">=": np.greater_equal,
        }[op]
        return lambda x1, x2: cmp(lhs(x1, x2), rhs(x1, x2))

    # arithmetic layer
    def arith(self):
        left = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()
            right = self.term()
            if op == "+":
                left = (lambda a, b: lambda x1, x2: a(x1, x2) + b(x1, x2))(left, right)
            else:
                left = (lambda a, b: lambda x1, x2: a(x1, x2) - b(x1, x2))(left, right)
        return left

    def _starts_atom(self):
        kind, val = self.peek()
        if kind == "num" or val in ("x1", "x2", "("):
            return True
        return val == "|" and not self.in_abs

    def term(self):
        left = self.unary()
        while True:
            val = self.peek()[1]
            if val in ("*", "/"):
                self.take()
                right = self.unary()
                if val == "*":
                    left = (lambda a, b: lambda x1, x2: a(x1, x2) * b(x1, x2))(left, right)
                else:
                    left = (lambda a, b: lambda x1, x2: a(x1, x2) / b(x1, x2))(left, right)
            elif self._starts_atom():
                right = self.unary()
                left = (lambda a, b: lambda x1, x2: a(x1, x2) * b(x1, x2))(left, right)
            else:
                return left

    def unary(self):
        if self.peek()[1] == "-":
            self.take()
            inner = self.unary()
            return lambda x1, x2: -inner(x1, x2)
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] in ("^", "**"):
            self.take()
            expo = self.unary()
            return lambda x1, x2: base(x1, x2) ** expo(x1, x2)
        return base

    def atom(self):
        kind, val = self.peek()
        if kind == "num":
            self.take()
            c = float(val)
            return lambda x1, x2: c
        if val == "x1":
            self.take()
            return lambda x1, x2: x1
        if val == "x2":
            self.take()
            return lambda x1, x2: x2
        if val == "(":
            self.take()
            inner = self.arith()
            self.take(")")
            return inner
        if val == "|":
            self.take()
            if self.peek()[1] == "x":
                self.take()
                self.take("|")
                return lambda x1, x2: np.hypot(x1, x2)
            self.in_abs += 1
            inner = self.arith()
            self.in_abs -= 1
            self.take("|")
            return lambda x1, x2: np.abs(inner(x1, x2))
        if val == "x":
            raise self.error("bare 'x' is only allowed as |x|")
        raise self.error(f"unexpected {val!r}")


@dataclass(frozen=True)
class Region:
    """A parsed predicate; calling it on coordinate arrays gives a mask."""

    text: str
    predicate: Callable = None

    def __call__(self, x1, x2) -> np.ndarray:
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        out = self.predicate(x1, x2)
        return np.broadcast_to(np.asarray(out, dtype=bool), np.broadcast(x1, x2).shape).copy()

    @property
    def is_empty_word(self) -> bool:
        return self.text.strip().lower() in _EMPTY_WORDS

    def fraction(self, coords: np.ndarray, h: float, samples: int = 4) -> np.ndarray:
        """Share of each node's ``h x h`` cell inside the region.

        Uses a symmetric ``samples x samples`` midpoint lattice, so a node on
        a straight interface gets exactly one half.
        """
        offs = ((np.arange(samples) + 0.5) / samples - 0.5) * h
        total = np.zeros(coords.shape[0])
        for dx in offs:
            for dy in offs:
                total += self(coords[:, 0] + dx, coords[:, 1] + dy)
        return total / samples**2


def parse_region(text: str) -> Region:
    if not isinstance(text, str) or not text.strip():
        raise RegionSyntaxError("region text must be a non-empty string")
    word = text.strip().lower()
    if word in _WHOLE_WORDS:
        return Region(text, lambda x1, x2: np.ones(np.broadcast(x1, x2).shape, dtype=bool))
    if word in _EMPTY_WORDS:
        return Region(text, lambda x1, x2: np.zeros(np.broadcast(x1, x2).shape, dtype=bool))
    body = text.strip()
    if body.startswith("{") and body.endswith("}"):
        body = body[1:-1]
    parser = _Parser(body)
    pred = parser.region()
    if parser.pos != len(parser.toks):
        raise parser.error("trailing input")
    return Region(text, pred)


WHOLE = parse_region("Omega")
EMPTY = parse_region("empty")
