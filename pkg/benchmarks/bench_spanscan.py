"""Compare the compiled span scanner against the pure-Python fallback.

Run from the repository root:

    python benchmarks/bench_spanscan.py [--chars 2000000] [--seed 0]

Both backends are loaded in the same process (the fallback module is
importable directly), results are checked for agreement, and per-backend
throughput is reported for every token class and a set of delimiters.
"""

from __future__ import annotations

import argparse
import string
import time

import numpy as np

from lpsynth import _spanscan_py, dsl, spanscan

CLASSES = [
    ("NUMBER", spanscan.CLS_NUMBER),
    ("WORD", spanscan.CLS_WORD),
    ("ALPHANUM", spanscan.CLS_ALPHANUM),
    ("ALL_CAPS", spanscan.CLS_ALL_CAPS),
    ("PROP_CASE", spanscan.CLS_PROP_CASE),
    ("LOWER", spanscan.CLS_LOWER),
    ("DIGIT", spanscan.CLS_DIGIT),
    ("CHAR", spanscan.CLS_CHAR),
]


def corpus(n_chars: int, seed: int) -> str:
    pool = list(string.ascii_letters + string.digits + "".join(dsl.DELIMITERS))
    rng = np.random.default_rng(seed)
    return "".join(rng.choice(pool, size=n_chars))


def bench(fn, *args, repeats: int = 3) -> tuple[float, object]:
    best = float("inf")
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--chars", type=int, default=2_000_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    text = corpus(args.chars, args.seed)
    mib = len(text) / 2**20
    print(f"active backend: {spanscan.backend()}")
    print(f"corpus: {len(text):,} chars\n")
    if spanscan.backend() != "compiled":
        print("note: compiled extension unavailable; timing the fallback "
              "against itself")

    header = f"{'scan':<12} {'python':>10} {'compiled':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name, cls in CLASSES:
        t_py, out_py = bench(_spanscan_py.scan_class, text, cls)
        t_c, out_c = bench(spanscan.scan_class, text, cls)
        assert out_py == out_c, f"backend disagreement on {name}"
        print(f"{name:<12} {mib / t_py:>8.1f}MB {mib / t_c:>8.1f}MB "
              f"{t_py / t_c:>7.1f}x")
    for ch in ".,- ":
        t_py, out_py = bench(_spanscan_py.scan_delimiter, text, ch)
        t_c, out_c = bench(spanscan.scan_delimiter, text, ch)
        assert out_py == out_c, f"backend disagreement on {ch!r}"
        print(f"{'delim ' + repr(ch):<12} {mib / t_py:>8.1f}MB "
              f"{mib / t_c:>8.1f}MB {t_py / t_c:>7.1f}x")
    print("\nthroughput is corpus size over the best of 3 runs")


if __name__ == "__main__":
    main()
