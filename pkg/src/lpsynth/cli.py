"""Command-line pipeline: generate data, train, synthesize, evaluate.

Exit codes: 0 success, 2 bad flags or inputs, 3 aborted work (task
generation exhausted, training diverged), 4 config or dialect mismatch,
5 synthesis finished without a consistent program.  Every command is
deterministic given identical flags, seeds, and checkpoint bytes.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter

from lpsynth import dsl, taskgen
from lpsynth import evaluate as ev
from lpsynth.search import EmptyBeam, first_consistent, two_level_synthesize
from lpsynth.train import (
    CorruptionError,
    DivergenceError,
    TrainConfig,
    VersionError,
    load_model,
    train,
)

EXIT_USAGE = 2
EXIT_ABORTED = 3
EXIT_CONFIG = 4
EXIT_UNSOLVED = 5

REPORT_NAMES = ("accuracy", "lengths", "diversity", "cooccurrence")

log = logging.getLogger(__name__)


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _setup_logging() -> None:
    levels = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}
    name = os.environ.get("LP_LOG", "error").lower()
    logging.basicConfig(level=levels.get(name, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    if args.n_tasks < 0:
        return _fail(EXIT_USAGE, "--n-tasks must be >= 0")
    try:
        cfg = taskgen.GenConfig(dialect=args.dialect,
                                n_examples=args.n_examples,
                                max_expressions=args.max_expressions,
                                max_string_len=args.max_string_len)
    except ValueError as err:
        return _fail(EXIT_USAGE, str(err))
    try:
        tasks = taskgen.generate_tasks(cfg, args.n_tasks, args.seed,
                                       workers=args.workers)
    except taskgen.GenerationExhausted as err:
        return _fail(EXIT_ABORTED, f"task generation exhausted: {err}")
    taskgen.write_dataset(args.out, tasks)
    print(f"wrote {len(tasks)} tasks to {args.out}")
    if tasks:
        hist = Counter(len(t.program.expressions) for t in tasks)
        rows = [[str(n), str(hist[n])] for n in sorted(hist)]
        print(ev.render_table(["expressions", "tasks"], rows), end="")
    return 0


# ---------------------------------------------------------------------------
# train


def _read_tasks(path: str) -> list[taskgen.Task]:
    return taskgen.read_dataset(path)


def _check_dialect(tasks, dialect: str, what: str) -> None:
    """Raises UnknownToken when a program uses tokens outside the dialect."""
    vocab = taskgen.program_vocab(dialect)
    for t in tasks:
        if t.program is None:
            raise ValueError(f"{what} contains tasks without programs")
        taskgen.encode_program(t.program, vocab)


def cmd_train(args) -> int:
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = TrainConfig.from_dict(json.load(fh))
    except FileNotFoundError:
        return _fail(EXIT_USAGE, f"config file not found: {args.config}")
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
        return _fail(EXIT_CONFIG, f"bad training config: {err}")
    try:
        tasks = _read_tasks(args.data)
        eval_tasks = _read_tasks(args.eval_data) if args.eval_data else None
    except FileNotFoundError as err:
        return _fail(EXIT_USAGE, str(err))
    except taskgen.FormatError as err:
        return _fail(EXIT_USAGE, f"bad dataset: {err}")
    if not tasks:
        return _fail(EXIT_USAGE, f"no tasks in {args.data}")
    try:
        _check_dialect(tasks, cfg.model.dialect, "training data")
    except (taskgen.UnknownToken, ValueError) as err:
        return _fail(EXIT_CONFIG,
                     f"dataset does not fit dialect "
                     f"{cfg.model.dialect!r}: {err}")

    eval_fn = None
    if eval_tasks and cfg.eval_every:
        cap = max(len(taskgen.program_tokens(t.program)) for t in tasks) + 2

        def eval_fn(model, held_out):
            return ev.evaluate_accuracy(model, held_out, beam_size=10,
                                        max_program_len=cap).accuracy

    metrics_path = os.path.splitext(args.out)[0] + ".metrics.csv"
    try:
        result = train(cfg, tasks, eval_tasks, metrics_path=metrics_path,
                       checkpoint_path=args.out, resume_from=args.resume,
                       eval_fn=eval_fn)
    except DivergenceError as err:
        return _fail(EXIT_ABORTED, f"training diverged: {err}")
    except (CorruptionError, VersionError) as err:
        return _fail(EXIT_CONFIG, f"cannot resume: {err}")
    except ValueError as err:
        return _fail(EXIT_CONFIG, str(err))
    print(f"finished at step {result.step}")
    print(f"checkpoint: {args.out}")
    print(f"metrics: {metrics_path}")
    return 0


# ---------------------------------------------------------------------------
# synth


def _load_task_file(path: str) -> taskgen.Task:
    with open(path, "r", encoding="utf-8") as fh:
        rec = json.load(fh)
    inputs = rec.get("inputs")
    outputs = rec.get("outputs")
    if (not isinstance(inputs, list) or not isinstance(outputs, list)
            or not inputs or len(inputs) != len(outputs)
            or not all(isinstance(s, str) for s in inputs + outputs)):
        raise ValueError(
            "task file needs equal-length string lists 'inputs', 'outputs'")
    # a ground-truth program in the file is legal but irrelevant here: the
    # search verifies candidates against the outputs alone
    return taskgen.Task(inputs=tuple(inputs), outputs=tuple(outputs),
                        program=None)


def _latent_names(model, codes) -> str:
    vocab = taskgen.latent_vocab(model.cfg.k)
    return " | ".join(vocab.token(c + 3) for c in codes)


def cmd_synth(args) -> int:
    try:
        model, _ = load_model(args.ckpt)
    except FileNotFoundError:
        return _fail(EXIT_USAGE, f"checkpoint not found: {args.ckpt}")
    except (CorruptionError, VersionError) as err:
        return _fail(EXIT_CONFIG, f"unusable checkpoint: {err}")
    try:
        task = _load_task_file(args.task)
    except FileNotFoundError:
        return _fail(EXIT_USAGE, f"task file not found: {args.task}")
    except (json.JSONDecodeError, ValueError) as err:
        return _fail(EXIT_USAGE, f"bad task file: {err}")
    try:
        candidates = two_level_synthesize(
            model, task, beam_size=args.beam, latent_beams=args.latent_beams,
            max_program_len=args.max_program_len)
    except EmptyBeam as err:
        return _fail(EXIT_USAGE, str(err))

    hit = first_consistent(candidates, task)
    headers = ["rank", "score", "", "program"]
    if args.show_latents:
        headers.append("latents")
    rows = []
    for i, c in enumerate(candidates, start=1):
        mark = "*" if hit is not None and c is hit else ""
        text = c.text if c.valid else f"(invalid) {c.text}"
        row = [str(i), f"{c.score:.4f}", mark, text]
        if args.show_latents:
            row.append(_latent_names(model, c.latent_codes))
        rows.append(row)
    if rows:
        print(ev.render_table(headers, rows), end="")
    if hit is None:
        print("no consistent program found")
        return EXIT_UNSOLVED
    print(f"consistent: {hit.text}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    reports = [r.strip() for r in args.report.split(",") if r.strip()]
    unknown = [r for r in reports if r not in REPORT_NAMES]
    if unknown or not reports:
        return _fail(EXIT_USAGE,
                     f"unknown report(s) {', '.join(unknown) or '(none)'}; "
                     f"choose from {', '.join(REPORT_NAMES)}")
    try:
        model, _ = load_model(args.ckpt)
    except FileNotFoundError:
        return _fail(EXIT_USAGE, f"checkpoint not found: {args.ckpt}")
    except (CorruptionError, VersionError) as err:
        return _fail(EXIT_CONFIG, f"unusable checkpoint: {err}")
    try:
        tasks = _read_tasks(args.data)
    except FileNotFoundError as err:
        return _fail(EXIT_USAGE, str(err))
    except taskgen.FormatError as err:
        return _fail(EXIT_USAGE, f"bad dataset: {err}")
    if not tasks:
        return _fail(EXIT_USAGE, f"no tasks in {args.data}")

    needs_programs = {"lengths", "cooccurrence"} & set(reports)
    if needs_programs and any(t.program is None for t in tasks):
        return _fail(EXIT_CONFIG,
                     f"reports {sorted(needs_programs)} need ground-truth "
                     "programs in the dataset")

    os.makedirs(args.out_dir, exist_ok=True)
    search_kw = dict(beam_size=args.beam, latent_beams=args.latent_beams,
                     max_program_len=args.max_program_len)
    try:
        for name in reports:
            out_path = os.path.join(args.out_dir, f"{name}.csv")
            if name == "accuracy":
                _report_accuracy(model, tasks, search_kw, out_path)
            elif name == "lengths":
                _report_lengths(model, tasks, search_kw, out_path)
            elif name == "diversity":
                _report_diversity(model, tasks, search_kw, out_path)
            else:
                _report_cooccurrence(model, tasks, out_path)
    except EmptyBeam as err:
        return _fail(EXIT_USAGE, str(err))
    except taskgen.UnknownToken as err:
        return _fail(EXIT_CONFIG, f"dataset does not fit the model's "
                                  f"dialect: {err}")
    return 0


def _report_accuracy(model, tasks, search_kw, out_path) -> None:
    r = ev.evaluate_accuracy(model, tasks, **search_kw)
    headers = ["n", "correct", "accuracy", "lo95", "hi95"]
    row = [str(r.n), str(r.correct), f"{r.accuracy:.4f}",
           f"{r.lo:.4f}", f"{r.hi:.4f}"]
    ev.write_csv(out_path, headers, [row])
    print(ev.render_table(headers, [row]), end="")
    print(f"-> {out_path}")


def _report_lengths(model, tasks, search_kw, out_path) -> None:
    rows = [[str(b.n_expressions), str(b.n_tasks), str(b.n_solved),
             f"{b.accuracy:.4f}"]
            for b in ev.length_bucket_report(model, tasks, **search_kw)]
    headers = ["expressions", "tasks", "solved", "accuracy"]
    ev.write_csv(out_path, headers, rows)
    print(ev.render_table(headers, rows), end="")
    print(f"-> {out_path}")


def _report_diversity(model, tasks, search_kw, out_path) -> None:
    rates = ev.diversity_report(model, tasks, **search_kw)
    rows = [[str(n), f"{rate:.4f}"] for n, rate in sorted(rates.items())]
    headers = ["n", "distinct_rate"]
    ev.write_csv(out_path, headers, rows)
    print(ev.render_table(headers, rows), end="")
    print(f"-> {out_path}")


def _report_cooccurrence(model, tasks, out_path) -> None:
    if model.cfg.dialect == "full":
        print("warning: co-occurrence on the full dialect rarely shows "
              "clean structure; the toy dialect is built for it",
              file=sys.stderr)
    table = ev.latent_cooccurrence(model, tasks)
    pct = table.percentages()
    headers = ["family"] + table.code_labels
    rows = [[fam] + [f"{p:.2f}" for p in pct[i]]
            for i, fam in enumerate(table.families)]
    ev.write_csv(out_path, headers, rows)
    print(ev.render_table(headers, rows), end="")
    print(f"-> {out_path}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lpsynth",
        description="two-level latent-code program synthesis pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workers", type=int, default=1,
                        help="cap on worker processes (data generation)")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common],
                       help="sample a synthetic task dataset")
    g.add_argument("--dialect", choices=list(dsl.DIALECTS), default="full")
    g.add_argument("--n-tasks", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--n-examples", type=int, default=4)
    g.add_argument("--max-expressions", type=int, default=10)
    g.add_argument("--max-string-len", type=int, default=100)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common],
                       help="train a model from a JSON config")
    t.add_argument("--config", required=True,
                   help="JSON mirroring the training config fields")
    t.add_argument("--data", required=True)
    t.add_argument("--eval", dest="eval_data",
                   help="held-out tasks for periodic accuracy")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--resume", metavar="CKPT",
                   help="continue from an earlier checkpoint")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synth", parents=[common],
                       help="synthesize a program for one task")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--task", required=True,
                   help="JSON file with 'inputs' and 'outputs' lists")
    s.add_argument("--beam", type=int, default=10)
    s.add_argument("--latent-beams", type=int, default=None,
                   help="default: floor(sqrt(beam))")
    s.add_argument("--max-program-len", type=int, default=48)
    s.add_argument("--show-latents", action="store_true")
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", parents=[common],
                       help="score a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--beam", type=int, default=10)
    e.add_argument("--latent-beams", type=int, default=None)
    e.add_argument("--max-program-len", type=int, default=48)
    e.add_argument("--report", default="accuracy",
                   help=f"comma list of {', '.join(REPORT_NAMES)}")
    e.add_argument("--out-dir", default=".")
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
