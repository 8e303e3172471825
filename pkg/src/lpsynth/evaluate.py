"""Synthesis metrics: execution-verified accuracy, beam diversity, program
overlap, and which latent codes co-occur with which expression families."""

from __future__ import annotations

import csv
import dataclasses
import math
from collections import Counter
from typing import Optional, Sequence

import numpy as np

from lpsynth import dsl, taskgen
from lpsynth.model import Model
from lpsynth.search import first_consistent, two_level_synthesize


def wilson_interval(correct: int, n: int,
                    z: float = 1.959963984540054) -> tuple[float, float]:
    """95% score interval for a binomial proportion; (0, 1) when n == 0."""
    if n == 0:
        return 0.0, 1.0
    p = correct / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


@dataclasses.dataclass(frozen=True)
class AccuracyReport:
    n: int
    correct: int
    accuracy: float
    lo: float
    hi: float


def solved_flags(model: Model, tasks, *, beam_size: int,
                 latent_beams: int = 1, max_program_len: int = 48,
                 decoder_only: bool = False) -> list[bool]:
    """Per-task: did any proposed candidate execute consistently?"""
    flags = []
    for task in tasks:
        cands = two_level_synthesize(
            model, task, beam_size=beam_size, latent_beams=latent_beams,
            max_program_len=max_program_len, decoder_only=decoder_only)
        flags.append(first_consistent(cands, task) is not None)
    return flags


def evaluate_accuracy(model: Model, tasks, **search_kw) -> AccuracyReport:
    flags = solved_flags(model, tasks, **search_kw)
    n, correct = len(flags), sum(flags)
    lo, hi = wilson_interval(correct, n)
    return AccuracyReport(n=n, correct=correct,
                          accuracy=correct / n if n else 0.0, lo=lo, hi=hi)


# ---------------------------------------------------------------------------
# sequence metrics


def _ngrams(tokens: Sequence, n: int) -> list[tuple]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def distinct_ngrams(beams: list[Sequence], n: int) -> float:
    """Unique n-grams across all beams over total token count; 0 if empty."""
    total = sum(len(b) for b in beams)
    if total == 0:
        return 0.0
    unique = set()
    for b in beams:
        unique.update(_ngrams(b, n))
    return len(unique) / total


def bleu(hyp: Sequence, ref: Sequence) -> float:
    """Geometric mean of clipped 1..4-gram precisions, no brevity penalty.

    Zero counts are smoothed to 1e-9 so a single missing order does not
    null the score."""
    precisions = []
    for n in range(1, 5):
        hyp_counts = Counter(_ngrams(hyp, n))
        ref_counts = Counter(_ngrams(ref, n))
        total = sum(hyp_counts.values())
        matched = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
        precisions.append(matched / total if total and matched else 1e-9)
    return math.exp(sum(math.log(p) for p in precisions) / 4)


def beam_diversity(model: Model, tasks, *, n: int = 4, beam_size: int,
                   latent_beams: int = 1, max_program_len: int = 48) -> float:
    """Mean distinct-n-gram rate of the candidate sets, one per task."""
    report = diversity_report(model, tasks, ns=(n,), beam_size=beam_size,
                              latent_beams=latent_beams,
                              max_program_len=max_program_len)
    return report[n]


def diversity_report(model: Model, tasks, *, ns=(1, 2, 3, 4), beam_size: int,
                     latent_beams: int = 1,
                     max_program_len: int = 48) -> dict[int, float]:
    """distinct-n rates for several n, searching each task only once."""
    sums = {n: 0.0 for n in ns}
    for task in tasks:
        cands = two_level_synthesize(
            model, task, beam_size=beam_size, latent_beams=latent_beams,
            max_program_len=max_program_len)
        beams = [c.tokens for c in cands]
        for n in ns:
            sums[n] += distinct_ngrams(beams, n)
    count = max(len(tasks), 1)
    return {n: s / count for n, s in sums.items()}


# ---------------------------------------------------------------------------
# accuracy by program length


@dataclasses.dataclass(frozen=True)
class BucketRow:
    n_expressions: int
    n_tasks: int
    n_solved: int

    @property
    def accuracy(self) -> float:
        return self.n_solved / self.n_tasks


def bucket_by_length(results: list[tuple[int, bool]]) -> list[BucketRow]:
    """Group (expression count, solved) pairs; empty buckets are omitted."""
    tally: dict[int, list[int]] = {}
    for n_expr, solved in results:
        got = tally.setdefault(n_expr, [0, 0])
        got[0] += 1
        got[1] += int(solved)
    return [BucketRow(n_expressions=k, n_tasks=v[0], n_solved=v[1])
            for k, v in sorted(tally.items())]


def length_bucket_report(model: Model, tasks, **search_kw) -> list[BucketRow]:
    for task in tasks:
        if task.program is None:
            raise ValueError("length buckets need ground-truth programs")
    flags = solved_flags(model, tasks, **search_kw)
    return bucket_by_length(
        [(len(t.program.expressions), ok) for t, ok in zip(tasks, flags)])


# ---------------------------------------------------------------------------
# latent / expression co-occurrence


_FAMILY_TYPES = (dsl.TypeToken.NUMBER, dsl.TypeToken.WORD,
                 dsl.TypeToken.ALPHANUM)
FAMILY_NAMES = [f"Get {pos} {t.value.capitalize()}"
                for t in _FAMILY_TYPES for pos in ("First", "Last")]


def expression_family(e) -> Optional[str]:
    """Label single-span extractions like "Get First Number"; None for the
    rest.  A family is a GetSpan covering exactly the i-th match of one
    type token, i in {1, -1}."""
    if not isinstance(e, dsl.GetSpan):
        return None
    if not (isinstance(e.r1, dsl.TypeToken) and e.r1 is e.r2
            and e.r1 in _FAMILY_TYPES):
        return None
    if e.i1 != e.i2 or e.i1 not in (1, -1):
        return None
    if e.b1 is not dsl.Boundary.START or e.b2 is not dsl.Boundary.END:
        return None
    pos = "First" if e.i1 == 1 else "Last"
    return f"Get {pos} {e.r1.value.capitalize()}"


@dataclasses.dataclass
class CooccurrenceTable:
    """counts[f, k]: how often family f landed on latent code k."""

    families: list[str]
    code_labels: list[str]
    counts: np.ndarray

    def percentages(self) -> np.ndarray:
        sums = self.counts.sum(axis=1, keepdims=True)
        return 100.0 * self.counts / np.maximum(sums, 1)

    def modal_share(self, family: str) -> float:
        row = self.counts[self.families.index(family)]
        return float(row.max() / max(row.sum(), 1))


def latent_cooccurrence(model: Model, tasks) -> CooccurrenceTable:
    """Assign each family expression the code at its block's position in
    the ground-truth program's quantized encoding."""
    block = 2 ** model.cfg.ell
    counts = np.zeros((len(FAMILY_NAMES), model.cfg.k), dtype=np.int64)
    for task in tasks:
        if task.program is None:
            raise ValueError("co-occurrence needs ground-truth programs")
        content = taskgen.encode_program(task.program, model.program_vocab)[1:-1]
        arr = np.array([content], dtype=np.int64)
        _, ids, _ = model.program_encode(arr)
        offset = 0
        for e in task.program.expressions:
            family = expression_family(e)
            if family is not None:
                code = int(ids[0, offset // block])
                counts[FAMILY_NAMES.index(family), code] += 1
            offset += len(taskgen.expression_tokens(e))
    observed = counts.sum(axis=1) > 0
    vocab = taskgen.latent_vocab(model.cfg.k)
    return CooccurrenceTable(
        families=[f for f, keep in zip(FAMILY_NAMES, observed) if keep],
        code_labels=[vocab.token(k + 3) for k in range(model.cfg.k)],
        counts=counts[observed],
    )


# ---------------------------------------------------------------------------
# report output


def render_table(headers: list[str], rows: list[list[str]]) -> str:
    """Aligned monospace table; first column left, the rest right."""
    table = [headers] + rows
    widths = [max(len(r[c]) for r in table) for c in range(len(headers))]
    lines = []
    for r in table:
        cells = [r[0].ljust(widths[0])]
        cells += [r[c].rjust(widths[c]) for c in range(1, len(headers))]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def write_csv(path: str, headers: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(headers)
        w.writerows(rows)
