# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled span scanner: the hot kernel behind `match_spans`.

Must stay semantically identical to `_spanscan_py` (the pure-Python fallback);
the test suite cross-checks both backends on random strings.
"""

CLS_NUMBER = 0
CLS_WORD = 1
CLS_ALPHANUM = 2
CLS_ALL_CAPS = 3
CLS_PROP_CASE = 4
CLS_LOWER = 5
CLS_DIGIT = 6
CLS_CHAR = 7

BACKEND = "compiled"


cdef inline bint _is_digit(Py_UCS4 c):
    return 48 <= <unsigned int> c <= 57


cdef inline bint _is_upper(Py_UCS4 c):
    return 65 <= <unsigned int> c <= 90


cdef inline bint _is_lower(Py_UCS4 c):
    return 97 <= <unsigned int> c <= 122


cdef inline bint _member(Py_UCS4 c, int cls):
    if cls == 0:  # NUMBER
        return _is_digit(c)
    if cls == 1:  # WORD
        return _is_upper(c) or _is_lower(c)
    if cls == 2:  # ALPHANUM
        return _is_upper(c) or _is_lower(c) or _is_digit(c)
    if cls == 3:  # ALL_CAPS
        return _is_upper(c)
    if cls == 5:  # LOWER
        return _is_lower(c)
    return False


def scan_class(str s, int cls):
    """Return (start, end) spans of token class `cls` in `s`, left to right."""
    cdef Py_ssize_t n = len(s)
    cdef Py_ssize_t i = 0
    cdef Py_ssize_t j
    spans = []
    if cls == CLS_DIGIT:
        for i in range(n):
            if _is_digit(s[i]):
                spans.append((i, i + 1))
        return spans
    if cls == CLS_CHAR:
        for i in range(n):
            if s[i] != u" ":
                spans.append((i, i + 1))
        return spans
    if cls == CLS_PROP_CASE:
        i = 0
        while i < n:
            if _is_upper(s[i]):
                j = i + 1
                while j < n and _is_lower(s[j]):
                    j += 1
                spans.append((i, j))
                i = j
            else:
                i += 1
        return spans
    i = 0
    while i < n:
        if _member(s[i], cls):
            j = i + 1
            while j < n and _member(s[j], cls):
                j += 1
            spans.append((i, j))
            i = j
        else:
            i += 1
    return spans


def scan_delimiter(str s, str ch):
    """Return single-character spans of every occurrence of delimiter `ch`."""
    cdef Py_ssize_t n = len(s)
    cdef Py_ssize_t i
    cdef Py_UCS4 c = ch[0]
    spans = []
    for i in range(n):
        if s[i] == c:
            spans.append((i, i + 1))
    return spans
