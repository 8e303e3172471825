"""Pure-Python span scanner: the fallback backend for token-class matching.

Both backends (this module and the compiled `_spanscan`) must implement the
exact same semantics: maximal-munch, non-overlapping, left-to-right spans over
ASCII character classes. Class membership is decided on ordinals, never on
`str.isalpha`-style unicode predicates, so the two backends cannot diverge on
exotic input.
"""

from __future__ import annotations

# Class codes shared by both backends.
CLS_NUMBER = 0  # [0-9]+
CLS_WORD = 1  # [A-Za-z]+
CLS_ALPHANUM = 2  # [A-Za-z0-9]+
CLS_ALL_CAPS = 3  # [A-Z]+
CLS_PROP_CASE = 4  # [A-Z][a-z]*
CLS_LOWER = 5  # [a-z]+
CLS_DIGIT = 6  # [0-9], single char
CLS_CHAR = 7  # any single non-space char

BACKEND = "python"


def _is_digit(o: int) -> bool:
    return 48 <= o <= 57


def _is_upper(o: int) -> bool:
    return 65 <= o <= 90


def _is_lower(o: int) -> bool:
    return 97 <= o <= 122


def _is_letter(o: int) -> bool:
    return _is_upper(o) or _is_lower(o)


def _is_alnum(o: int) -> bool:
    return _is_letter(o) or _is_digit(o)


_RUN_PREDICATES = {
    CLS_NUMBER: _is_digit,
    CLS_WORD: _is_letter,
    CLS_ALPHANUM: _is_alnum,
    CLS_ALL_CAPS: _is_upper,
    CLS_LOWER: _is_lower,
}


def scan_class(s: str, cls: int) -> list[tuple[int, int]]:
    """Return (start, end) spans of token class `cls` in `s`, left to right."""
    n = len(s)
    spans: list[tuple[int, int]] = []
    if cls == CLS_DIGIT:
        for i in range(n):
            if _is_digit(ord(s[i])):
                spans.append((i, i + 1))
        return spans
    if cls == CLS_CHAR:
        for i in range(n):
            if s[i] != " ":
                spans.append((i, i + 1))
        return spans
    if cls == CLS_PROP_CASE:
        i = 0
        while i < n:
            if _is_upper(ord(s[i])):
                j = i + 1
                while j < n and _is_lower(ord(s[j])):
                    j += 1
                spans.append((i, j))
                i = j
            else:
                i += 1
        return spans
    pred = _RUN_PREDICATES[cls]
    i = 0
    while i < n:
        if pred(ord(s[i])):
            j = i + 1
            while j < n and pred(ord(s[j])):
                j += 1
            spans.append((i, j))
            i = j
        else:
            i += 1
    return spans


def scan_delimiter(s: str, ch: str) -> list[tuple[int, int]]:
    """Return single-character spans of every occurrence of delimiter `ch`."""
    return [(i, i + 1) for i in range(len(s)) if s[i] == ch]
