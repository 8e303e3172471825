"""Two-level beam search: latent codes first, then programs per code.

The latent level proposes `latent_beams` discrete code sequences; each one
conditions an independent program-level beam of width beam_size //
latent_beams.  Candidates are ranked by the sum of the two sequence
log-probabilities, without length normalization, and verified against the
task examples by execution.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Optional

import numpy as np

from lpsynth import dsl, taskgen
from lpsynth.model import Model


class EmptyBeam(Exception):
    """The search was configured with no room for any hypothesis."""


@dataclasses.dataclass(frozen=True)
class Hypothesis:
    """tokens excludes BOS; a finished hypothesis ends with EOS unless it
    was cut off at the length limit."""

    tokens: tuple[int, ...]
    score: float
    finished: bool


def beam_search(step_fn: Callable[[np.ndarray], np.ndarray], *,
                beam_size: int, max_len: int, eos_id: int
                ) -> list[Hypothesis]:
    """Width-limited exact search over token sequences.

    step_fn maps (H, P) prefixes to (H, V) next-token log-probs; all live
    prefixes in a round have equal length, P=0 on the first call.  Scores
    are raw log-prob sums.  Finished hypotheses stay in the pool without
    being extended.  Ties break lexicographically on the token ids, so the
    result order is deterministic.  Returns at most beam_size hypotheses,
    best first.  max_len counts rounds and therefore content tokens: a
    hypothesis that spends every round on content comes back unfinished,
    without an EOS term in its score.
    """
    if beam_size < 1:
        raise EmptyBeam(f"beam size {beam_size} leaves no hypothesis slots")
    if max_len < 1:
        raise EmptyBeam(f"max length {max_len} admits no tokens")
    live = [Hypothesis((), 0.0, False)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        prefixes = np.array([h.tokens for h in live],
                            dtype=np.int64).reshape(len(live), -1)
        logprobs = step_fn(prefixes)
        flat = np.array([h.score for h in live])[:, None] + logprobs
        # preselect by score alone, keeping boundary ties for the exact
        # lexicographic sort below; the finished pool never shrinks the
        # quota available to expansions
        k = min(flat.size, beam_size)
        kth = np.partition(flat.ravel(), -k)[-k]
        pool: list[tuple[float, tuple[int, ...], bool]] = [
            (h.score, h.tokens, True) for h in finished]
        for i, v in np.argwhere(flat >= kth):
            tokens = live[i].tokens + (int(v),)
            pool.append((float(flat[i, v]), tokens, int(v) == eos_id))
        pool.sort(key=lambda c: (-c[0], c[1]))
        del pool[beam_size:]
        finished = [Hypothesis(t, s, True) for s, t, done in pool if done]
        live = [Hypothesis(t, s, False) for s, t, done in pool if not done]
        if not live:
            break
    out = finished + live  # leftovers were cut off at the length limit
    out.sort(key=lambda h: (-h.score, h.tokens))
    return out


@dataclasses.dataclass(frozen=True)
class Candidate:
    """One ranked synthesis result; program is None when the token stream
    does not assemble into a well-formed program."""

    tokens: tuple[int, ...]
    text: str
    program: Optional[dsl.Program]
    score: float
    latent_codes: tuple[int, ...]
    latent_score: float
    program_score: float

    @property
    def valid(self) -> bool:
        return self.program is not None


def _latent_step(model: Model, cache) -> Callable[[np.ndarray], np.ndarray]:
    def step(prefixes: np.ndarray) -> np.ndarray:
        h = prefixes.shape[0]
        bos = np.full((h, 1), taskgen.BOS_ID, dtype=np.int64)
        # class space -> latent vocab space: code k lives at id k + 3
        return model.latent_logprobs(
            cache, np.concatenate([bos, prefixes + 3], axis=1))

    return step


def _program_step(model: Model, cache,
                  code: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    def step(prefixes: np.ndarray) -> np.ndarray:
        h = prefixes.shape[0]
        bos = np.full((h, 1), taskgen.BOS_ID, dtype=np.int64)
        return model.program_logprobs(
            cache, code, np.concatenate([bos, prefixes], axis=1))

    return step


def _to_candidate(model: Model, prog: Hypothesis, codes: tuple[int, ...],
                  latent_score: float, decoder_only: bool) -> Candidate:
    tokens = tuple(t for t in prog.tokens if t != taskgen.EOS_ID)
    try:
        program = taskgen.decode_program(tokens, model.program_vocab)
        text = dsl.render_program(program)
    except dsl.ParseError:
        program = None
        text = " ".join(model.program_vocab.token(t) for t in tokens)
    score = prog.score if decoder_only else latent_score + prog.score
    return Candidate(tokens=tokens, text=text, program=program, score=score,
                     latent_codes=codes, latent_score=latent_score,
                     program_score=prog.score)


def two_level_synthesize(model: Model, task, *, beam_size: int,
                         latent_beams: Optional[int] = None,
                         max_program_len: int = 48, dedup: bool = True,
                         decoder_only: bool = False) -> list[Candidate]:
    """Propose up to latent_beams * (beam_size // latent_beams) programs.

    latent_beams defaults to floor(sqrt(beam_size)), splitting the budget
    evenly between the two levels.  latent_beams=1 degenerates to a
    conventional single beam over programs conditioned on the one best
    latent sequence.  With dedup, candidates that render to the same
    program text keep only their best-scoring copy.  decoder_only ranks by
    the program log-prob alone instead of the sum.
    """
    if latent_beams is None:
        latent_beams = max(1, math.isqrt(max(beam_size, 0)))
    if latent_beams < 1:
        raise EmptyBeam(f"latent_beams {latent_beams} leaves nothing to search")
    if beam_size < latent_beams:
        raise EmptyBeam(
            f"beam size {beam_size} cannot cover {latent_beams} latent beams")
    inner = beam_size // latent_beams
    cache = model.encode_task(task)

    latents = beam_search(
        _latent_step(model, cache), beam_size=latent_beams,
        max_len=model.latent_length(max_program_len),
        eos_id=model.eos_class)

    candidates: list[Candidate] = []
    for lat in latents:
        codes = tuple(t for t in lat.tokens if t != model.eos_class)
        programs = beam_search(
            _program_step(model, cache, np.array(codes, dtype=np.int64)),
            beam_size=inner, max_len=max_program_len,
            eos_id=taskgen.EOS_ID)
        for prog in programs:
            candidates.append(
                _to_candidate(model, prog, codes, lat.score, decoder_only))

    candidates.sort(key=lambda c: (-c.score, c.tokens, c.latent_codes))
    if dedup:
        candidates = dedup_candidates(candidates)
    return candidates


def dedup_candidates(candidates: list[Candidate]) -> list[Candidate]:
    """Drop later copies of the same rendered program; the input is ranked,
    so the kept copy is the best-scoring one."""
    seen: set[str] = set()
    kept = []
    for c in candidates:
        key = c.text if c.valid else " ".join(map(str, c.tokens))
        if key not in seen:
            seen.add(key)
            kept.append(c)
    return kept


def first_consistent(candidates: list[Candidate], task) -> Optional[Candidate]:
    """The best-ranked candidate that maps every example input to its
    output, or None."""
    for c in candidates:
        if c.program is not None and dsl.is_consistent(
                c.program, list(task.inputs), list(task.outputs)):
            return c
    return None
