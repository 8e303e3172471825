"""Backend selection for the span scanner.

The compiled extension is preferred when importable; set LPSYNTH_PURE_PYTHON=1
to force the pure-Python fallback (used by tests and the benchmark).
"""

from __future__ import annotations

import os

from lpsynth import _spanscan_py

if os.environ.get("LPSYNTH_PURE_PYTHON", "").strip() in ("", "0"):
    try:
        from lpsynth import _spanscan as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = _spanscan_py
else:
    _impl = _spanscan_py

CLS_NUMBER = _spanscan_py.CLS_NUMBER
CLS_WORD = _spanscan_py.CLS_WORD
CLS_ALPHANUM = _spanscan_py.CLS_ALPHANUM
CLS_ALL_CAPS = _spanscan_py.CLS_ALL_CAPS
CLS_PROP_CASE = _spanscan_py.CLS_PROP_CASE
CLS_LOWER = _spanscan_py.CLS_LOWER
CLS_DIGIT = _spanscan_py.CLS_DIGIT
CLS_CHAR = _spanscan_py.CLS_CHAR

scan_class = _impl.scan_class
scan_delimiter = _impl.scan_delimiter


def backend() -> str:
    """Name of the active backend: "compiled" or "python"."""
    return _impl.BACKEND
