"""Task sampling, dataset serialization, and the three token vocabularies.

A task is N input/output string pairs, optionally with the generating program.
Sampling draws a program uniformly over the grammar, then rejection-samples
inputs biased to contain the token occurrences the program references,
re-drawing the program when no input works (degenerate programs: empty
outputs, statically impossible spans).

Vocabularies are built from the grammar alone, never from data, so ids are
stable across datasets of the same dialect. Reserved ids are shared by all
three streams: 0 = PAD, 1 = BOS, 2 = EOS.

Program tokenization: one token per expression, except a constant contributes
two tokens ("Const" + the character) and a composition contributes one token
per constituent, the outer one spelled with a trailing "(" so decoding is
unambiguous. The " | " separator is not a token.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Optional

import numpy as np

from lpsynth import dsl

PAD_ID, BOS_ID, EOS_ID = 0, 1, 2
SPECIALS = ("<pad>", "<bos>", "<eos>")

MAX_TASK_STRING_LEN = 100


class GenerationExhausted(Exception):
    """The retry budget ran out before a task was accepted."""


class FormatError(Exception):
    """A dataset line is not a valid task record."""

    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class UnknownToken(Exception):
    """A token has no id in the vocabulary."""


@dataclass(frozen=True)
class Task:
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    program: Optional[dsl.Program] = None

    def __post_init__(self):
        if len(self.inputs) == 0 or len(self.inputs) != len(self.outputs):
            raise ValueError("inputs/outputs must have the same nonzero length")
        for s in list(self.inputs) + list(self.outputs):
            if len(s) > MAX_TASK_STRING_LEN:
                raise ValueError(f"string longer than {MAX_TASK_STRING_LEN} chars")
        if self.program is not None and any(not o for o in self.outputs):
            raise ValueError("outputs must be nonempty when a program is present")


@dataclass(frozen=True)
class GenConfig:
    dialect: str = "full"
    n_examples: int = 4
    max_expressions: int = 10
    max_string_len: int = 100
    max_retries: int = 32  # input failures tolerated per program before it is resampled
    max_program_attempts: int = 1000

    def __post_init__(self):
        if self.dialect not in dsl.DIALECTS:
            raise ValueError(f"unknown dialect {self.dialect!r}")
        if not 1 <= self.max_expressions <= dsl.MAX_EXPRESSIONS:
            raise ValueError("max_expressions outside 1..10")
        if not 1 <= self.max_string_len <= MAX_TASK_STRING_LEN:
            raise ValueError("max_string_len outside 1..100")


@dataclass
class GenStats:
    program_attempts: int = 0
    input_resamples: int = 0  # redraws beyond the first draw, accepted program only


def task_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-task stream: identical regardless of worker count."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, index))))


# ---------------------------------------------------------------------------
# Program sampling

_REGEX_TOKENS_FULL: tuple[dsl.RegexToken, ...] = tuple(dsl.TypeToken) + tuple(dsl.DELIMITERS)
_REGEX_TOKENS_TOY: tuple[dsl.RegexToken, ...] = dsl.TOY_TYPES + tuple(dsl.TOY_DELIMITERS)


def _choice(rng: np.random.Generator, seq):
    return seq[int(rng.integers(len(seq)))]


def _sample_substring(rng, cfg) -> dsl.Expression:
    if cfg.dialect == "toy" or rng.integers(2) == 1:
        regexes = _REGEX_TOKENS_TOY if cfg.dialect == "toy" else _REGEX_TOKENS_FULL
        indices = dsl.TOY_INDICES if cfg.dialect == "toy" else dsl.INDICES
        return dsl.GetSpan(
            _choice(rng, regexes),
            _choice(rng, indices),
            dsl.Boundary.START if cfg.dialect == "toy" else _choice(rng, list(dsl.Boundary)),
            _choice(rng, regexes),
            _choice(rng, indices),
            dsl.Boundary.END if cfg.dialect == "toy" else _choice(rng, list(dsl.Boundary)),
        )
    return dsl.SubStr(_choice(rng, dsl.POSITIONS), _choice(rng, dsl.POSITIONS))


def _sample_nesting(rng) -> dsl.NestingOp:
    kind = int(rng.integers(8))
    if kind == 0:
        return dsl.GetToken(_choice(rng, list(dsl.TypeToken)), _choice(rng, dsl.INDICES))
    if kind == 1:
        return dsl.ToCase(_choice(rng, list(dsl.CaseKind)))
    if kind == 2:
        return dsl.Replace(_choice(rng, dsl.DELIMITERS), _choice(rng, dsl.DELIMITERS))
    if kind == 3:
        return dsl.Trim()
    if kind == 4:
        return dsl.GetUpto(_choice(rng, _REGEX_TOKENS_FULL))
    if kind == 5:
        return dsl.GetFrom(_choice(rng, _REGEX_TOKENS_FULL))
    if kind == 6:
        return dsl.GetFirst(_choice(rng, list(dsl.TypeToken)), _choice(rng, dsl.INDICES))
    return dsl.GetAll(_choice(rng, list(dsl.TypeToken)))


def sample_expression(rng: np.random.Generator, cfg: GenConfig) -> dsl.Expression:
    """One expression, uniform over grammar productions, then argument domains."""
    if cfg.dialect == "toy":
        return _sample_substring(rng, cfg)
    form = int(rng.integers(5))
    if form == 0:
        return _sample_substring(rng, cfg)
    if form == 1:
        return _sample_nesting(rng)
    if form == 2:
        return dsl.Compose(_sample_nesting(rng), _sample_nesting(rng))
    if form == 3:
        return dsl.Compose(_sample_nesting(rng), _sample_substring(rng, cfg))
    return dsl.ConstStr(_choice(rng, dsl.CHARSET))


def sample_program(rng: np.random.Generator, cfg: GenConfig) -> dsl.Program:
    n = int(rng.integers(1, cfg.max_expressions + 1))
    return dsl.Program(tuple(sample_expression(rng, cfg) for _ in range(n)))


# ---------------------------------------------------------------------------
# Input sampling

_LOWER = dsl.LOWER_CHARS
_UPPER = dsl.UPPER
_DIGITS = dsl.DIGITS
_ALNUM = _UPPER + _LOWER + _DIGITS
_NONSPACE = [c for c in dsl.CHARSET if c != " "]


def _run(rng, alphabet: str, lo: int, hi: int) -> str:
    n = int(rng.integers(lo, hi + 1))
    return "".join(alphabet[i] for i in rng.integers(len(alphabet), size=n))


def _instance(rng, r: dsl.RegexToken) -> str:
    """A string containing at least one span of regex token `r`."""
    if isinstance(r, str):
        return r
    t = dsl.TypeToken
    if r is t.NUMBER:
        return _run(rng, _DIGITS, 1, 4)
    if r is t.DIGIT:
        return _run(rng, _DIGITS, 1, 1)
    if r is t.WORD:
        return _run(rng, _UPPER + _LOWER, 2, 6)
    if r is t.LOWER:
        return _run(rng, _LOWER, 1, 5)
    if r is t.ALL_CAPS:
        return _run(rng, _UPPER, 1, 3)
    if r is t.PROP_CASE:
        return _choice(rng, _UPPER) + _run(rng, _LOWER, 1, 5)
    if r is t.ALPHANUM:
        return _run(rng, _ALNUM, 2, 6)
    return _choice(rng, _NONSPACE)  # CHAR


# Span classes each chunk kind can introduce, used to keep fillers away from
# classes whose occurrence count is capped by the program.
_T = dsl.TypeToken
_FILLER_KINDS: tuple[tuple[frozenset, object], ...] = (
    (frozenset({_T.WORD, _T.ALPHANUM, _T.LOWER, _T.CHAR}),
     lambda rng: _run(rng, _LOWER, 2, 6)),
    (frozenset({_T.WORD, _T.ALPHANUM, _T.PROP_CASE, _T.ALL_CAPS, _T.CHAR}),
     lambda rng: _choice(rng, _UPPER) + _run(rng, _LOWER, 1, 5)),
    (frozenset({_T.NUMBER, _T.DIGIT, _T.ALPHANUM, _T.CHAR}),
     lambda rng: _run(rng, _DIGITS, 1, 4)),
    (frozenset({_T.ALL_CAPS, _T.WORD, _T.ALPHANUM, _T.PROP_CASE, _T.CHAR}),
     lambda rng: _run(rng, _UPPER, 1, 3)),
)


@dataclass
class _InputPlan:
    """What an input must look like for the program to have a chance.

    counts holds hard occurrence bounds (lo, hi) per regex token — hi is None
    when unbounded. soft holds extra presence hints (composition outers read a
    derived string, so their needs are only a bias, never verified). substr
    pairs constrain the feasible input lengths. place biases where a token's
    instances land: 0 = early, 1 = anywhere, 2 = late — prefix/suffix readers
    only see one side of their cut point.
    """

    counts: dict
    soft: dict
    substr_pairs: tuple
    place: dict


def _substr_ok(k1: int, k2: int, n: int) -> bool:
    # mirrors the interpreter: 1-based, negatives from the end, clamped
    if n == 0:
        return False
    p1 = k1 if k1 > 0 else n + k1 + 1
    p2 = k2 if k2 > 0 else n + k2 + 1
    p1 = min(max(p1, 1), n)
    p2 = min(max(p2, 1), n)
    return p1 <= p2


def _analyze(program: dsl.Program) -> Optional[_InputPlan]:
    """Occurrence bounds and length constraints; None when no input can work.

    For a span between occurrences o1, o2 of the same token the interpreter
    demands position1 < position2, which over ordered disjoint spans reduces
    to o1 <= o2 for (START, END) boundaries and o1 < o2 otherwise. With a
    negative index resolving to count+i+1 this turns into lower/upper bounds
    on the occurrence count.
    """
    lo: dict = {}
    hi: dict = {}
    soft: dict = {}
    place: dict = {}
    pairs: list[tuple[int, int]] = []

    def bump(table, r, c):
        table[r] = max(table.get(r, 0), c)

    def cap(r, c):
        hi[r] = min(hi.get(r, c), c)

    def put(r, where):
        place[r] = where if place.get(r, where) == where else 1  # conflict → anywhere

    def strict(e) -> bool:  # False → impossible on every input
        if isinstance(e, dsl.SubStr):
            pairs.append((e.k1, e.k2))
            return True
        if isinstance(e, dsl.GetSpan):
            bump(lo, e.r1, abs(e.i1))
            bump(lo, e.r2, abs(e.i2))
            if e.r1 == e.r2:
                slack = 0 if (e.b1, e.b2) == (dsl.Boundary.START, dsl.Boundary.END) else 1
                i1, i2 = e.i1, e.i2
                if i1 > 0 and i2 > 0 and i1 + slack > i2:
                    return False
                if i1 < 0 and i2 < 0 and (-i2) + slack > (-i1):
                    return False
                if i1 > 0 > i2:
                    bump(lo, e.r1, i1 - i2 - 1 + slack)
                if i1 < 0 < i2:
                    cap(e.r1, i2 - i1 - 1 - slack)
            return True
        if isinstance(e, dsl.GetToken):
            bump(lo, e.t, abs(e.i))
            return True
        if isinstance(e, dsl.GetFirst):
            if e.i < 0:
                return False
            bump(lo, e.t, e.i)
            return True
        if isinstance(e, dsl.GetAll):
            bump(lo, e.t, 1)
            return True
        if isinstance(e, dsl.GetUpto):
            bump(lo, e.r, 1)
            return True
        if isinstance(e, dsl.GetFrom):
            bump(lo, e.r, 1)
            put(e.r, 0)  # something must remain after the first occurrence
            return True
        return True  # ConstStr, ToCase, Replace, Trim: total on any input

    def hint(e, where):
        if isinstance(e, (dsl.GetToken, dsl.GetFirst)):
            bump(soft, e.t, abs(e.i))
            put(e.t, where)
        elif isinstance(e, dsl.GetAll):
            bump(soft, e.t, 1)
            put(e.t, where)
        elif isinstance(e, (dsl.GetUpto, dsl.GetFrom)):
            bump(soft, e.r, 1)
            put(e.r, where)

    for e in program.expressions:
        if isinstance(e, dsl.Compose):
            if isinstance(e.outer, dsl.GetFirst) and e.outer.i < 0:
                return None
            if not strict(e.inner):
                return None
            if isinstance(e.inner, dsl.GetUpto):
                put(e.inner.r, 2)  # the outer only sees the prefix
                hint(e.outer, 0)
            elif isinstance(e.inner, dsl.GetFrom):
                hint(e.outer, 2)  # the outer only sees the suffix
            else:
                hint(e.outer, 1)
        elif not strict(e):
            return None
    counts = {r: (c, hi.get(r)) for r, c in lo.items()}
    for r, bound in hi.items():
        c_lo, c_hi = counts.get(r, (1, bound))
        if c_hi is not None and c_hi < c_lo:
            return None
        counts[r] = (c_lo, c_hi)
    return _InputPlan(counts, soft, tuple(pairs), place)


def _feasible_lengths(plan: _InputPlan, max_len: int) -> Optional[np.ndarray]:
    """Boolean mask over lengths 0..max_len where every substring op is defined."""
    mask = np.zeros(max_len + 1, dtype=bool)
    for n in range(1, max_len + 1):
        mask[n] = all(_substr_ok(k1, k2, n) for k1, k2 in plan.substr_pairs)
    return mask if mask.any() else None


_ASSEMBLY_TRIES = 16


def _assemble(rng, plan: _InputPlan, texts: list[str], bands: np.ndarray,
              feasible: np.ndarray, space_ok: bool,
              safe_delims: list[str]) -> Optional[str]:
    """Arrange parts into a candidate string; None when it misses the plan.

    Ordering is random within each placement band, with adjacent bands
    overlapping so the bias never hard-partitions the string.
    """
    order = np.argsort(bands * 0.8 + rng.random(len(texts)), kind="stable")
    us = rng.random(len(texts))
    pieces = []
    # Separators keep adjacent runs from merging; occasionally omitted so the
    # distribution still covers packed strings.
    sep_weight = 0.1 if plan.counts else 0.3
    for j, idx in enumerate(order):
        if j > 0:
            u = us[j]
            if u < sep_weight:
                sep = ""
            elif space_ok and (u < 0.7 or not safe_delims):
                sep = " "
            elif safe_delims:
                sep = _choice(rng, safe_delims)
            else:
                sep = ""
            pieces.append(sep)
        pieces.append(texts[int(idx)])
    s = "".join(pieces)

    pad = " " if space_ok else (safe_delims[0] if safe_delims else None)
    while 0 < len(s) < len(feasible) and not feasible[len(s)] and pad:
        s += pad
    if not (0 < len(s) < len(feasible) and feasible[len(s)]):
        return None
    for r, (c_lo, c_hi) in plan.counts.items():
        c = len(dsl.match_spans(s, r))
        if c < c_lo or (c_hi is not None and c > c_hi):
            return None
    return s


def _draw_example(rng: np.random.Generator, cfg: GenConfig, plan: _InputPlan,
                  feasible: np.ndarray,
                  program: dsl.Program) -> Optional[tuple[str, str]]:
    """One biased draw: fresh part strings, then a few arrangements of them.

    Span ordering between different token classes depends on where the
    instances land, so each arrangement gets an execution check and the first
    consistent one wins; None when every arrangement misses.
    """
    capped = {r for r, (_, c_hi) in plan.counts.items() if c_hi is not None}
    parts: list[tuple[str, int]] = []
    for r, (c_lo, _) in plan.counts.items():
        band = plan.place.get(r, 1)
        parts += [(_instance(rng, r), band) for _ in range(c_lo)]
    for r, want in plan.soft.items():
        c_lo, c_hi = plan.counts.get(r, (0, None))
        extra = min(want, c_hi) if c_hi is not None else want
        band = plan.place.get(r, 1)
        parts += [(_instance(rng, r), band) for _ in range(max(0, extra - c_lo))]

    fillers = [make for classes, make in _FILLER_KINDS if not classes & capped]
    safe_delims = [d for d in dsl.DELIMITERS
                   if d not in capped and (d == " " or _T.CHAR not in capped)]
    if _T.CHAR not in capped and safe_delims:
        fillers.append(lambda rng: _choice(rng, safe_delims))
    space_ok = " " not in capped

    # Quadratic bias toward short inputs: concatenation programs only fit the
    # output cap when the extracted spans are short, so short inputs carry
    # most of the acceptance mass while long ones remain reachable.
    options = np.flatnonzero(feasible[1:]) + 1
    target_len = int(options[int(rng.random() ** 2 * len(options))])
    while fillers and sum(len(p) + 1 for p, _ in parts) < target_len and len(parts) < 40:
        parts.append((fillers[int(rng.integers(len(fillers)))](rng), 1))
    if not parts:
        return None

    texts = [p for p, _ in parts]
    bands = np.array([b for _, b in parts], dtype=np.float64)
    misses = 0
    for _ in range(_ASSEMBLY_TRIES):
        s = _assemble(rng, plan, texts, bands, feasible, space_ok, safe_delims)
        if s is None:
            # arrangement never even matched the count plan: these parts are
            # probably unsalvageable, so stop early and redraw them
            misses += 1
            if misses >= 6:
                return None
            continue
        try:
            out = dsl.execute(program, s)
        except dsl.ExecError:
            continue
        if 1 <= len(out) <= cfg.max_string_len:
            return s, out
    return None


def _min_output_len(program: dsl.Program) -> int:
    # Trim (bare or as a composition outer) may erase its operand; every other
    # expression contributes at least one character or fails.
    total = 0
    for e in program.expressions:
        root = e.outer if isinstance(e, dsl.Compose) else e
        total += 0 if isinstance(root, dsl.Trim) else 1
    return total


def sample_input(rng: np.random.Generator, cfg: GenConfig,
                 program: dsl.Program) -> Optional[str]:
    """One biased input draw for `program`; None when the draw misses."""
    plan = _analyze(program)
    if plan is None:
        return None
    feasible = _feasible_lengths(plan, cfg.max_string_len)
    if feasible is None:
        return None
    drawn = _draw_example(rng, cfg, plan, feasible, program)
    return None if drawn is None else drawn[0]


def sample_task_with_stats(rng: np.random.Generator,
                           cfg: GenConfig) -> tuple[Task, GenStats]:
    stats = GenStats()
    for _ in range(cfg.max_program_attempts):
        stats.program_attempts += 1
        program = sample_program(rng, cfg)
        if _min_output_len(program) > cfg.max_string_len:
            continue
        plan = _analyze(program)
        if plan is None:
            continue
        feasible = _feasible_lengths(plan, cfg.max_string_len)
        if feasible is None:
            continue
        inputs: list[str] = []
        outputs: list[str] = []
        failures = 0
        while len(inputs) < cfg.n_examples and failures <= cfg.max_retries:
            drawn = _draw_example(rng, cfg, plan, feasible, program)
            if drawn is None:
                failures += 1
            else:
                inputs.append(drawn[0])
                outputs.append(drawn[1])
        if len(inputs) == cfg.n_examples:
            stats.input_resamples = failures
            return Task(tuple(inputs), tuple(outputs), program), stats
    raise GenerationExhausted(
        f"no task accepted after {cfg.max_program_attempts} program attempts"
    )


def sample_task(rng: np.random.Generator, cfg: GenConfig) -> Task:
    """Rejection-sample one task; raises GenerationExhausted beyond the budget."""
    task, _ = sample_task_with_stats(rng, cfg)
    return task


def _gen_one(args: tuple[int, int, GenConfig]) -> Task:
    seed, index, cfg = args
    return sample_task(task_rng(seed, index), cfg)


def generate_tasks(cfg: GenConfig, n_tasks: int, seed: int,
                   workers: int = 1) -> list[Task]:
    """n_tasks tasks from independent per-index streams; worker count does not
    change the result."""
    jobs = [(seed, i, cfg) for i in range(n_tasks)]
    if workers <= 1:
        return [_gen_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_gen_one, jobs, chunksize=max(1, n_tasks // (workers * 8))))


# ---------------------------------------------------------------------------
# Dataset files: one JSON object per line


def write_dataset(path: str, tasks: Iterable[Task]) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        for t in tasks:
            rec: dict = {"inputs": list(t.inputs), "outputs": list(t.outputs)}
            if t.program is not None:
                rec["program"] = dsl.render_program(t.program)
            fh.write(json.dumps(rec) + "\n")
    os.replace(tmp, path)


def read_dataset(path: str) -> list[Task]:
    """Parse a task-per-line dataset; FormatError carries the 1-based line."""
    tasks = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise FormatError(lineno, f"bad JSON: {err}") from None
            if not isinstance(rec, dict):
                raise FormatError(lineno, "record is not an object")
            inputs = rec.get("inputs")
            outputs = rec.get("outputs")
            if not isinstance(inputs, list) or not all(isinstance(s, str) for s in inputs):
                raise FormatError(lineno, "inputs must be a list of strings")
            if not isinstance(outputs, list) or not all(isinstance(s, str) for s in outputs):
                raise FormatError(lineno, "outputs must be a list of strings")
            program = None
            if "program" in rec:
                if not isinstance(rec["program"], str):
                    raise FormatError(lineno, "program must be a string")
                try:
                    program = dsl.parse_program(rec["program"])
                except dsl.ParseError as err:
                    raise FormatError(lineno, f"bad program: {err}") from None
            try:
                tasks.append(Task(tuple(inputs), tuple(outputs), program))
            except ValueError as err:
                raise FormatError(lineno, str(err)) from None
    return tasks


# ---------------------------------------------------------------------------
# Vocabularies


class Vocabulary:
    """An ordered token list with reserved ids 0=PAD, 1=BOS, 2=EOS."""

    def __init__(self, tokens: list[str]):
        if list(tokens[:3]) != list(SPECIALS):
            raise ValueError("vocabulary must start with <pad>, <bos>, <eos>")
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise UnknownToken(repr(token)) from None

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for t in self.tokens:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh])


@lru_cache(maxsize=None)
def char_vocab() -> Vocabulary:
    return Vocabulary(list(SPECIALS) + list(dsl.CHARSET))


def _nesting_token_strings() -> list[str]:
    toks: list[str] = []
    types = [t.value for t in dsl.TypeToken]
    regexes = types + list(dsl.DELIMITERS)
    toks += [f"GetToken_{t}_{i}" for t in types for i in dsl.INDICES]
    toks += [f"ToCase_{k.value}" for k in dsl.CaseKind]
    toks += [f"Replace_{d1}_{d2}" for d1 in dsl.DELIMITERS for d2 in dsl.DELIMITERS]
    toks.append("Trim")
    toks += [f"GetUpto_{r}" for r in regexes]
    toks += [f"GetFrom_{r}" for r in regexes]
    toks += [f"GetFirst_{t}_{i}" for t in types for i in dsl.INDICES]
    toks += [f"GetAll_{t}" for t in types]
    return toks


def _getspan_token_strings(regexes: list[str], indices) -> list[str]:
    toks = []
    bounds = [b.value for b in dsl.Boundary]
    for r1 in regexes:
        for i1 in indices:
            for b1 in bounds:
                for r2 in regexes:
                    for i2 in indices:
                        for b2 in bounds:
                            if b1 == "START" and b2 == "END":
                                toks.append(f"GetSpan_{r1}_{i1}_{r2}_{i2}")
                            else:
                                toks.append(
                                    f"GetSpan_{r1}_{i1}_{b1}_{r2}_{i2}_{b2}"
                                )
    return toks


@lru_cache(maxsize=None)
def program_vocab(dialect: str) -> Vocabulary:
    """The grammar-enumerated program-token vocabulary for a dialect."""
    if dialect not in dsl.DIALECTS:
        raise ValueError(f"unknown dialect {dialect!r}")
    if dialect == "toy":
        regexes = [t.value for t in dsl.TOY_TYPES] + list(dsl.TOY_DELIMITERS)
        spans = [
            f"GetSpan_{r1}_{i1}_{r2}_{i2}"
            for r1 in regexes
            for i1 in dsl.TOY_INDICES
            for r2 in regexes
            for i2 in dsl.TOY_INDICES
        ]
        return Vocabulary(list(SPECIALS) + spans)
    toks: list[str] = list(SPECIALS)
    toks.append("Const")
    toks += list(dsl.CHARSET)
    nesting = _nesting_token_strings()
    toks += nesting
    toks += [s + "(" for s in nesting]  # Compose outer markers
    toks += [f"SubStr({k1}, {k2})" for k1 in dsl.POSITIONS for k2 in dsl.POSITIONS]
    types = [t.value for t in dsl.TypeToken]
    toks += _getspan_token_strings(types + list(dsl.DELIMITERS), dsl.INDICES)
    return Vocabulary(toks)


@lru_cache(maxsize=None)
def latent_vocab(codebook_size: int) -> Vocabulary:
    """Latent ids 3..K+2 display as TOK_3..TOK_{K+2}; 0..2 are reserved."""
    return Vocabulary(list(SPECIALS) + [f"TOK_{k + 3}" for k in range(codebook_size)])


# ---------------------------------------------------------------------------
# Token streams


def expression_tokens(e: dsl.Expression) -> list[str]:
    if isinstance(e, dsl.ConstStr):
        return ["Const", e.char]
    if isinstance(e, dsl.Compose):
        return [dsl.render_expression(e.outer) + "(", dsl.render_expression(e.inner)]
    return [dsl.render_expression(e)]


def program_tokens(p: dsl.Program) -> list[str]:
    toks: list[str] = []
    for e in p.expressions:
        toks += expression_tokens(e)
    return toks


@lru_cache(maxsize=4096)
def _is_opener(token: str) -> bool:
    """True iff `token` marks a composition outer: a nesting-op render plus a
    trailing "(". A plain render can also end in "(" when its last argument is
    that delimiter (e.g. "GetUpto_("), but then the prefix never parses."""
    if len(token) < 2 or not token.endswith("("):
        return False
    try:
        p = dsl.parse_program(token[:-1])
    except dsl.ParseError:
        return False
    return len(p.expressions) == 1 and isinstance(p.expressions[0], dsl.NESTING_TYPES)


def tokens_to_program(tokens: list[str]) -> dsl.Program:
    """Inverse of program_tokens; raises ParseError on malformed streams."""
    chunks = []
    i = 0
    while i < len(tokens):
        t = tokens[i]
        if t == "Const":
            if i + 1 >= len(tokens) or len(tokens[i + 1]) != 1:
                raise dsl.ParseError(i, "Const marker without a character token")
            chunks.append(f"Const({tokens[i + 1]})")
            i += 2
        elif _is_opener(t):
            if i + 1 >= len(tokens):
                raise dsl.ParseError(i, "composition opener without an inner token")
            chunks.append(f"{t}{tokens[i + 1]})")
            i += 2
        else:
            chunks.append(t)
            i += 1
    return dsl.parse_program(" | ".join(chunks))


def encode_string(s: str, vocab: Vocabulary) -> list[int]:
    return [BOS_ID] + [vocab.id(c) for c in s] + [EOS_ID]


def encode_program(p: dsl.Program, vocab: Vocabulary) -> list[int]:
    return [BOS_ID] + [vocab.id(t) for t in program_tokens(p)] + [EOS_ID]


def decode_program(ids: Iterable[int], vocab: Vocabulary) -> dsl.Program:
    """Drop reserved ids, map back to tokens, reassemble. ParseError if malformed."""
    tokens = [vocab.token(i) for i in ids if i not in (PAD_ID, BOS_ID, EOS_ID)]
    return tokens_to_program(tokens)


def pad_batch(seqs: list[list[int]], length: Optional[int] = None,
              pad_id: int = PAD_ID) -> np.ndarray:
    n = max((len(s) for s in seqs), default=0)
    length = n if length is None else length
    out = np.full((len(seqs), length), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out
