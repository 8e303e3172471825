"""Metric fixtures with hand-computed values, plus report plumbing on a
tiny model."""

import csv
import math

import numpy as np
import pytest

from lpsynth import dsl, taskgen
from lpsynth.evaluate import (
    FAMILY_NAMES,
    bleu,
    bucket_by_length,
    beam_diversity,
    distinct_ngrams,
    evaluate_accuracy,
    expression_family,
    latent_cooccurrence,
    length_bucket_report,
    render_table,
    solved_flags,
    wilson_interval,
    write_csv,
)
from lpsynth.model import Model, ModelConfig
from lpsynth.search import first_consistent, two_level_synthesize


def span(t, i):
    return dsl.GetSpan(t, i, dsl.Boundary.START, t, i, dsl.Boundary.END)


# ---------------------------------------------------------------------------
# wilson


def test_wilson_frozen_values():
    assert wilson_interval(8, 10) == pytest.approx(
        (0.49016247153664183, 0.9433178485456247))
    assert wilson_interval(0, 10) == pytest.approx(
        (0.0, 0.2775327998628892))
    assert wilson_interval(50, 100) == pytest.approx(
        (0.4038315303659956, 0.5961684696340044))
    assert wilson_interval(0, 0) == (0.0, 1.0)


def test_wilson_against_direct_formula():
    z = 1.959963984540054
    for correct, n in [(0, 1), (1, 1), (3, 7), (19, 20), (250, 1000)]:
        p = correct / n
        denom = 1 + z * z / n
        center = (p + z * z / (2 * n)) / denom
        half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
        lo, hi = wilson_interval(correct, n)
        assert lo == pytest.approx(max(0.0, center - half))
        assert hi == pytest.approx(min(1.0, center + half))
        assert 0.0 <= lo <= p <= hi <= 1.0


# ---------------------------------------------------------------------------
# diversity


def test_distinct_ngrams_fixtures():
    assert distinct_ngrams([["a", "b"], ["a", "b"]], 1) == 0.5
    ten = [[str(i) for i in range(10)]] * 10
    assert distinct_ngrams(ten, 2) == pytest.approx(0.09)
    assert distinct_ngrams([["a"]], 2) == 0.0
    assert distinct_ngrams([], 3) == 0.0
    assert distinct_ngrams([[], []], 1) == 0.0


def test_distinct_ngrams_all_unique():
    beams = [["a", "b"], ["c", "d"]]
    assert distinct_ngrams(beams, 1) == 1.0
    assert distinct_ngrams(beams, 2) == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# bleu


def test_bleu_identical_is_one():
    toks = list("abcde")
    assert bleu(toks, toks) == pytest.approx(1.0)


def test_bleu_near_miss_frozen():
    hyp = ["a", "b", "c", "d", "e"]
    ref = ["a", "b", "c", "d", "f"]
    # precisions 4/5, 3/4, 2/3, 1/2
    assert bleu(hyp, ref) == pytest.approx(0.668740304976422)


def test_bleu_disjoint_is_smoothed_floor():
    assert bleu(list("abcd"), list("wxyz")) == pytest.approx(1e-9)


def test_bleu_clips_repeated_tokens():
    # hyp over-generates "a": unigram matches clip at the reference count
    val = bleu(["a", "a", "a", "a"], ["a", "b", "c", "d"])
    assert val == pytest.approx(math.exp((math.log(0.25) + 3 * math.log(1e-9)) / 4))


def test_bleu_is_asymmetric_without_brevity_penalty():
    # a short exact prefix scores perfect precision: no brevity penalty
    assert bleu(list("abcd"), list("abcdefgh")) == pytest.approx(1.0)
    assert bleu(list("abcdefgh"), list("abcd")) < 1.0


# ---------------------------------------------------------------------------
# buckets


def test_bucket_by_length_omits_empty_buckets():
    rows = bucket_by_length([(1, True), (1, False), (2, True), (5, False)])
    assert [(r.n_expressions, r.n_tasks, r.n_solved) for r in rows] == [
        (1, 2, 1), (2, 1, 1), (5, 1, 0)]
    assert rows[0].accuracy == 0.5
    assert [r.n_expressions for r in rows] == [1, 2, 5]  # 3 and 4 omitted


# ---------------------------------------------------------------------------
# expression families


def test_expression_family_labels():
    n = dsl.TypeToken.NUMBER
    w = dsl.TypeToken.WORD
    a = dsl.TypeToken.ALPHANUM
    assert expression_family(span(n, 1)) == "Get First Number"
    assert expression_family(span(n, -1)) == "Get Last Number"
    assert expression_family(span(w, -1)) == "Get Last Word"
    assert expression_family(span(a, 1)) == "Get First Alphanum"
    assert set(FAMILY_NAMES) == {
        "Get First Number", "Get Last Number", "Get First Word",
        "Get Last Word", "Get First Alphanum", "Get Last Alphanum"}


def test_expression_family_rejects_non_members():
    n = dsl.TypeToken.NUMBER
    w = dsl.TypeToken.WORD
    assert expression_family(span(n, 2)) is None  # not first/last
    assert expression_family(span(".", 1)) is None  # delimiter, not a type
    assert expression_family(
        dsl.GetSpan(n, 1, dsl.Boundary.START, w, 1, dsl.Boundary.END)) is None
    assert expression_family(
        dsl.GetSpan(n, 1, dsl.Boundary.END, n, 1, dsl.Boundary.END)) is None
    assert expression_family(
        dsl.GetSpan(n, 1, dsl.Boundary.START, n, -1, dsl.Boundary.END)) is None
    assert expression_family(dsl.Trim()) is None
    # ALL_CAPS spans are extractions too, but not one of the six families
    assert expression_family(span(dsl.TypeToken.ALL_CAPS, 1)) is None


# ---------------------------------------------------------------------------
# model-driven reports


@pytest.fixture(scope="module")
def toy_model():
    cfg = ModelConfig(dialect="toy", embed_dim=16, hidden_dim=32,
                      n_layers=1, n_heads=2, ell=1, k=4)
    return Model(cfg, np.random.default_rng(0))


@pytest.fixture(scope="module")
def toy_tasks():
    gc = taskgen.GenConfig(dialect="toy", n_examples=2, max_expressions=2,
                            max_string_len=14)
    return [taskgen.sample_task(taskgen.task_rng(31, i), gc) for i in range(3)]


def make_task(program, inputs):
    outputs = tuple(dsl.execute(program, s) for s in inputs)
    return taskgen.Task(inputs=tuple(inputs), outputs=outputs, program=program)


def test_accuracy_report_matches_manual_loop(toy_model, toy_tasks):
    report = evaluate_accuracy(toy_model, toy_tasks, beam_size=3,
                               latent_beams=1, max_program_len=2)
    manual = []
    for task in toy_tasks:
        cands = two_level_synthesize(toy_model, task, beam_size=3,
                                     latent_beams=1, max_program_len=2)
        manual.append(first_consistent(cands, task) is not None)
    assert report.n == 3
    assert report.correct == sum(manual)
    assert report.accuracy == sum(manual) / 3
    assert (report.lo, report.hi) == wilson_interval(report.correct, 3)
    assert solved_flags(toy_model, toy_tasks, beam_size=3, latent_beams=1,
                        max_program_len=2) == manual


def test_length_bucket_report_uses_ground_truth_lengths(toy_model, toy_tasks):
    rows = length_bucket_report(toy_model, toy_tasks, beam_size=2,
                                latent_beams=1, max_program_len=2)
    assert sum(r.n_tasks for r in rows) == len(toy_tasks)
    want_buckets = sorted({len(t.program.expressions) for t in toy_tasks})
    assert [r.n_expressions for r in rows] == want_buckets
    for r in rows:
        assert 0 <= r.n_solved <= r.n_tasks


def test_beam_diversity_bounds_and_determinism(toy_model, toy_tasks):
    kw = dict(n=2, beam_size=4, latent_beams=2, max_program_len=3)
    d1 = beam_diversity(toy_model, toy_tasks, **kw)
    d2 = beam_diversity(toy_model, toy_tasks, **kw)
    assert d1 == d2
    assert 0.0 <= d1 <= 1.0
    assert beam_diversity(toy_model, [], n=2, beam_size=4) == 0.0


def test_latent_cooccurrence_table(toy_model):
    n = dsl.TypeToken.NUMBER
    w = dsl.TypeToken.WORD
    tasks = [
        make_task(dsl.Program((span(n, 1),)), ["ab 12 cd 9", "7 x"]),
        make_task(dsl.Program((span(w, -1), span(n, 1))), ["ab 12 cd"]),
        # delimiter span: contributes no family observation
        make_task(dsl.Program(
            (dsl.GetSpan(".", 1, dsl.Boundary.START, ",", 1,
                         dsl.Boundary.END),)), [".ab,"]),
    ]
    table = latent_cooccurrence(toy_model, tasks)
    assert set(table.families) == {"Get First Number", "Get Last Word"}
    assert table.code_labels == ["TOK_3", "TOK_4", "TOK_5", "TOK_6"]
    assert table.counts.shape == (2, 4)
    first_number = table.counts[table.families.index("Get First Number")]
    assert first_number.sum() == 2  # one from each of the first two tasks
    assert table.counts[table.families.index("Get Last Word")].sum() == 1
    pct = table.percentages()
    assert np.allclose(pct.sum(axis=1), 100.0, atol=0.1)
    for fam in table.families:
        assert 1 / toy_model.cfg.k <= table.modal_share(fam) <= 1.0


def test_latent_cooccurrence_requires_programs(toy_model):
    bare = taskgen.Task(inputs=("a",), outputs=("a",), program=None)
    with pytest.raises(ValueError, match="ground-truth"):
        latent_cooccurrence(toy_model, [bare])


# ---------------------------------------------------------------------------
# report output


def test_render_table_alignment():
    text = render_table(["name", "n"], [["ab", "7"], ["c", "1234"]])
    assert text == ("name     n\n"
                    "ab       7\n"
                    "c     1234\n")


def test_write_csv_roundtrip(tmp_path):
    path = str(tmp_path / "report.csv")
    write_csv(path, ["a", "b"], [[1, 2], [3, 4]])
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows == [["a", "b"], ["1", "2"], ["3", "4"]]
