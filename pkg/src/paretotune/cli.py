"""Command-line entry point: ``paretotune {space,sample,tune,pareto,report}``.

Exit codes: 0 success, 2 usage error, 3 evaluator failure, 4 corrupt journal.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import re
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .evaluator import (
    BUILTIN_OBJECTIVES,
    BuiltinEvaluator,
    EvaluationRequest,
    EvaluatorError,
    SubprocessEvaluator,
)
from .journal import CorruptJournalError
from .optimizer import EvaluationError, SessionOptions, TuningSession, resume, run_session
from .pareto import filter_valid, format_value, front_csv, hypervolume_2d, pareto_front
from .space import BUNDLED_SPACES, Configuration, ParameterSpace, SpaceError, bundled_space_text, load_space, sample_indices
from .surrogate import ForestParams

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_EVALUATOR = 3
EXIT_JOURNAL = 4

JOURNAL_NAME = "journal.jsonl"

log = logging.getLogger("paretotune")


class UsageError(Exception):
    pass


# -- argument helpers -------------------------------------------------------

def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonnegative(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


_VALID_RE = re.compile(r"^\s*([A-Za-z_][\w.-]*)\s*<\s*([-+0-9.eE]+)\s*$")


def parse_valid(exprs: Sequence[str] | None) -> dict[str, float] | None:
    """Parse ``--valid "ate_m<0.05"`` expressions (strict upper bounds only)."""
    if not exprs:
        return None
    out = {}
    for expr in exprs:
        m = _VALID_RE.match(expr)
        if not m:
            raise UsageError(f"invalid --valid expression {expr!r}; expected <objective><<value>, e.g. ate_m<0.05")
        try:
            out[m.group(1)] = float(m.group(2))
        except ValueError:
            raise UsageError(f"invalid bound in --valid {expr!r}") from None
    return out


def _seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("PARETOTUNE_SEED")
    if env is None:
        return 0
    try:
        seed = int(env)
    except ValueError:
        raise UsageError(f"PARETOTUNE_SEED must be an integer, got {env!r}") from None
    if seed < 0:
        raise UsageError("PARETOTUNE_SEED must be non-negative")
    return seed


def _objectives(text: str | None) -> tuple[str, ...] | None:
    if not text:
        return None
    names = tuple(n.strip() for n in text.split(",") if n.strip())
    if len(set(names)) != len(names) or not names:
        raise UsageError(f"invalid --objectives {text!r}")
    return names


def make_evaluator(spec: str, objectives: tuple[str, ...] | None, timeout: float | None = None,
                   parallel: int = 1, delay: float = 0.0):
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        try:
            ev = BuiltinEvaluator(name, delay=delay)
        except EvaluatorError as exc:
            raise UsageError(str(exc)) from None
        if objectives and set(objectives) - set(BUILTIN_OBJECTIVES):
            raise UsageError(f"builtin evaluators report {', '.join(BUILTIN_OBJECTIVES)}")
        return ev
    if spec.startswith("cmd:"):
        command = spec.split(":", 1)[1].strip()
        if not command:
            raise UsageError("empty evaluator command")
        if not objectives:
            raise UsageError("--objectives is required with a cmd: evaluator")
        return SubprocessEvaluator(command, objectives, timeout=timeout, parallel=parallel)
    raise UsageError(f"--evaluator must be builtin:NAME or cmd:\"...\", got {spec!r}")


def _load_space(path: str) -> ParameterSpace:
    try:
        return load_space(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None


def _parse_ref(text: str | None, n: int) -> tuple[float, ...] | None:
    if text is None:
        return None
    try:
        ref = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"invalid reference point {text!r}") from None
    if len(ref) != n:
        raise UsageError(f"reference point needs {n} values, got {len(ref)}")
    return ref


def _write(path: str | Path | None, text: str) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


# -- reporting --------------------------------------------------------------

@dataclass
class ReportSummary:
    objectives: list[str]
    total_samples: int
    valid_samples: int
    front_size: int
    hypervolume: float | None = None
    reference: list[float] | None = None
    best: dict[str, dict[str, Any]] = field(default_factory=dict)
    default: dict[str, Any] | None = None
    speedup: dict[str, float] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = asdict(self)
        doc.update(doc.pop("extra"))
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"

    def table(self) -> str:
        lines = [
            f"samples          {self.total_samples}",
            f"valid samples    {self.valid_samples}",
            f"front size       {self.front_size}",
        ]
        if self.hypervolume is not None:
            lines.append(f"hypervolume      {self.hypervolume:.6g}  (reference {', '.join(f'{r:.6g}' for r in self.reference)})")
        if self.default is not None:
            vals = ", ".join(f"{o}={self.default['objectives'][o]:.6g}" for o in self.objectives)
            lines.append(f"default          {vals}")
        if self.best:
            lines.append("")
            head = f"{'best in':<14}" + "".join(f"{o:>14}" for o in self.objectives) + f"{'vs default':>12}"
            lines.append(head)
            for o in self.objectives:
                row = self.best[o]
                cells = "".join(f"{row['objectives'][k]:>14.6g}" for k in self.objectives)
                ratio = self.speedup.get(o)
                lines.append(f"{o:<14}{cells}{(f'{ratio:.3f}x' if ratio is not None else '-'):>12}")
        return "\n".join(lines) + "\n"


def build_report(samples, objectives: Sequence[str], thresholds=None, ref=None, default=None,
                 clip_to_ref: bool = False) -> ReportSummary:
    """Summarize measured samples.

    ``default`` is a (config, metrics) pair; ratios are default / best, so
    values above 1 mean the best front point improves on the default.
    """
    objectives = list(objectives)
    ok = [s for s in samples if s.ok]
    valid = filter_valid(ok, thresholds)
    by_key = {s.key: s for s in valid}
    keys = pareto_front((s.key, s.vector(objectives)) for s in valid)
    front = [by_key[k] for k in keys]
    summary = ReportSummary(objectives, len(samples), len(valid), len(front))
    if len(objectives) == 2 and front:
        if ref is None:
            ref = tuple(float(v) for v in np.max([s.vector(objectives) for s in valid], axis=0))
        pts = [s.vector(objectives) for s in front]
        if clip_to_ref:
            pts = [p for p in pts if p[0] <= ref[0] and p[1] <= ref[1]]
        summary.hypervolume = hypervolume_2d(pts, ref)
        summary.reference = list(ref)
    for j, o in enumerate(objectives):
        if not front:
            break
        best = min(front, key=lambda s: s.vector(objectives)[j])
        summary.best[o] = {"config": best.config.as_dict(), "objectives": dict(zip(objectives, best.vector(objectives)))}
    if default is not None:
        config, metrics = default
        summary.default = {"config": config.as_dict(), "objectives": {o: metrics[o] for o in objectives}}
        for o in summary.best:
            b = summary.best[o]["objectives"][o]
            if b > 0:
                summary.speedup[o] = metrics[o] / b
    return summary


def points_csv(session: TuningSession) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*session.space.names, *session.objectives, "source", "iteration", "error"])
    for s in session.samples:
        w.writerow([*(format_value(v) for v in s.config.values),
                    *((repr(s.metrics[o]) if s.ok else "") for o in session.objectives),
                    s.source_label, s.source, s.error or ""])
    return buf.getvalue()


def _default_metrics(session: TuningSession, config: Configuration | None, evaluator=None):
    if config is None:
        return None
    key = session.space.flat_index(config)
    for s in session.samples:
        if s.key == key and s.ok:
            return config, s.metrics
    if evaluator is None:
        return None
    res = evaluator.evaluate([EvaluationRequest(len(session.samples), config)])
    if not res or not res[0].ok or any(o not in res[0].metrics for o in session.objectives):
        return None
    return config, res[0].metrics


# -- commands ---------------------------------------------------------------

def cmd_space(args) -> int:
    if args.dump:
        try:
            _write(None, bundled_space_text(args.dump))
        except KeyError as exc:
            raise UsageError(str(exc.args[0])) from None
        return EXIT_OK
    if not args.space:
        raise UsageError("give a space file or --dump NAME")
    space = _load_space(args.space)
    print(f"{space.name or args.space}: {len(space.params)} parameters, "
          f"cardinality {space.cardinality}, feature width {space.width}")
    for p in space.params:
        default = f"  default={format_value(p.default)}" if p.default is not None else ""
        print(f"  {p.name:<22} {p.kind:<12} {len(p.values):>4} values{default}")
    return EXIT_OK


def cmd_sample(args) -> int:
    space = _load_space(args.space)
    if args.n > space.cardinality:
        raise UsageError(f"--n {args.n} exceeds the space cardinality {space.cardinality}")
    rng = np.random.default_rng(_seed(args.seed))
    keys = sample_indices(space, args.n, rng).tolist()
    configs = [space.config_at(k) for k in keys]
    evaluator = None
    if args.evaluator:
        evaluator = make_evaluator(args.evaluator, _objectives(args.objectives), args.timeout, args.parallel)
    objectives = list(_objectives(args.objectives) or (evaluator.objectives if evaluator else ()))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = list(space.names)
    if evaluator:
        header += [*objectives, "error"]
    w.writerow(header)
    results = {}
    if evaluator:
        results = {r.id: r for r in evaluator.evaluate([EvaluationRequest(i, c) for i, c in enumerate(configs)])}
    for i, c in enumerate(configs):
        row = [format_value(v) for v in c.values]
        if evaluator:
            r = results.get(i)
            if r is not None and r.ok:
                row += [repr(r.metrics[o]) for o in objectives] + [""]
            else:
                row += [""] * len(objectives) + [r.reason if r is not None else "no result"]
        w.writerow(row)
    _write(args.out, buf.getvalue())
    return EXIT_OK


def cmd_tune(args) -> int:
    space = _load_space(args.space)
    objectives = _objectives(args.objectives)
    evaluator = make_evaluator(args.evaluator, objectives, args.timeout, args.parallel, args.delay)
    objectives = objectives or tuple(evaluator.objectives)
    thresholds = parse_valid(args.valid)
    if thresholds:
        unknown = set(thresholds) - set(objectives)
        if unknown:
            raise UsageError(f"--valid names unknown objective(s): {', '.join(sorted(unknown))}")
    out = Path(args.out)
    journal = out / JOURNAL_NAME
    if args.rs > space.cardinality:
        raise UsageError(f"--rs {args.rs} exceeds the space cardinality {space.cardinality}")

    if journal.exists() and args.resume:
        session = resume(journal)
        session.run(evaluator)
        session.close()
    elif journal.exists():
        raise UsageError(f"{journal} already exists; pass --resume to continue it or choose another --out")
    else:
        forest = ForestParams(
            n_trees=args.trees, max_depth=args.max_depth, min_samples_leaf=args.min_leaf,
            feature_subsample=args.feature_fraction, seed=_seed(args.seed),
        )
        try:
            options = SessionOptions(
                rs=args.rs, max_iterations=args.max_iters, per_iteration_cap=args.cap,
                total_budget=args.budget, pool_cap=args.pool_cap, forest_params=forest,
                validity_thresholds=thresholds, seed=_seed(args.seed),
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        out.mkdir(parents=True, exist_ok=True)
        session = run_session(space, evaluator, options, journal, objectives)

    front = session.measured_front()
    _write(out / "front.csv", front_csv(front, space.names, session.objectives))
    _write(out / "points.csv", points_csv(session))
    default = _default_metrics(session, space.default_configuration(), evaluator)
    summary = build_report(session.samples, session.objectives, session.options.validity_thresholds,
                           session.reference, default, clip_to_ref=True)
    summary.extra = {
        "status": session.status,
        "stop_reason": session.stop_reason,
        "iterations": [asdict(r) for r in session.iteration_log],
    }
    _write(out / "summary.json", summary.to_json())
    print(f"{session.status} ({session.stop_reason}): {len(session.samples)} samples, "
          f"front of {len(front)} written to {out / 'front.csv'}")
    return EXIT_OK


def _journal_session(path: str) -> TuningSession:
    if not Path(path).exists():
        raise UsageError(f"journal not found: {path}")
    session = resume(path, reopen=False)
    if not session.successful:
        raise CorruptJournalError(f"{path}: journal holds no successful samples")
    return session


def cmd_pareto(args) -> int:
    session = _journal_session(args.samples)
    thresholds = parse_valid(args.valid)
    if thresholds is None:
        thresholds = session.options.validity_thresholds
    try:
        front = session.measured_front(thresholds or {})
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    _write(args.out, front_csv(front, session.space.names, session.objectives))
    return EXIT_OK


def cmd_report(args) -> int:
    session = _journal_session(args.samples)
    thresholds = parse_valid(args.valid)
    if thresholds is None:
        thresholds = session.options.validity_thresholds
    ref = _parse_ref(args.ref, len(session.objectives))
    if args.default:
        try:
            doc = json.loads(Path(args.default).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read default configuration {args.default}: {exc}") from None
        default_config = session.space.make(doc)
    else:
        default_config = session.space.default_configuration()
    evaluator = None
    if args.evaluator:
        evaluator = make_evaluator(args.evaluator, tuple(session.objectives), args.timeout)
    default = _default_metrics(session, default_config, evaluator)
    if default_config is not None and default is None:
        raise UsageError("default configuration is neither in the journal nor evaluable (pass --evaluator)")
    try:
        summary = build_report(session.samples, session.objectives, thresholds, ref, default)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    sys.stdout.write(summary.table())
    if args.out:
        _write(args.out, summary.to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paretotune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("space", help="describe a space file or print a bundled one")
    p.add_argument("space", nargs="?")
    p.add_argument("--dump", metavar="NAME", help=f"print a bundled space ({', '.join(BUNDLED_SPACES)})")
    p.set_defaults(func=cmd_space)

    p = sub.add_parser("sample", help="draw distinct random configurations")
    p.add_argument("--space", required=True)
    p.add_argument("--n", type=_nonnegative, required=True)
    p.add_argument("--seed", type=_nonnegative)
    p.add_argument("--evaluator")
    p.add_argument("--objectives")
    p.add_argument("--timeout", type=float)
    p.add_argument("--parallel", type=_positive, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("tune", help="run the active-learning search")
    p.add_argument("--space", required=True)
    p.add_argument("--evaluator", required=True, help='builtin:NAME or cmd:"program args"')
    p.add_argument("--objectives", help="comma-separated objective names, all minimized")
    p.add_argument("--rs", type=_positive, default=3000, help="random batch size")
    p.add_argument("--max-iters", type=_nonnegative, default=10)
    p.add_argument("--cap", type=_positive, default=500, help="max new evaluations per iteration")
    p.add_argument("--budget", type=_positive, help="max total evaluations")
    p.add_argument("--pool-cap", type=_positive, default=2_000_000)
    p.add_argument("--seed", type=_nonnegative)
    p.add_argument("--valid", action="append", metavar="EXPR", help='validity bound such as "ate_m<0.05"')
    p.add_argument("--trees", type=_positive, default=100)
    p.add_argument("--max-depth", type=_nonnegative)
    p.add_argument("--min-leaf", type=_positive, default=2)
    p.add_argument("--feature-fraction", type=float, default=1.0 / 3.0)
    p.add_argument("--timeout", type=float, help="per-batch timeout for cmd: evaluators (seconds)")
    p.add_argument("--parallel", type=_positive, default=1, help="concurrent evaluator processes")
    p.add_argument("--delay", type=float, default=0.0, help="artificial seconds per builtin evaluation")
    p.add_argument("--resume", action="store_true", help="continue the journal found in --out")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("pareto", help="measured front of a journal")
    p.add_argument("--samples", required=True, help="session journal")
    p.add_argument("--valid", action="append", metavar="EXPR")
    p.add_argument("--out")
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("report", help="summary of a journal against the default configuration")
    p.add_argument("--samples", required=True)
    p.add_argument("--ref", help="reference point, comma-separated in objective order")
    p.add_argument("--default", help="JSON file with the default configuration")
    p.add_argument("--valid", action="append", metavar="EXPR")
    p.add_argument("--evaluator", help="used to evaluate the default when it is not in the journal")
    p.add_argument("--timeout", type=float)
    p.add_argument("--out", help="write the JSON summary here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, SpaceError, FileNotFoundError) as exc:
        print(f"paretotune {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EvaluatorError, EvaluationError) as exc:
        print(f"paretotune {args.command}: evaluator failure: {exc}", file=sys.stderr)
        return EXIT_EVALUATOR
    except CorruptJournalError as exc:
        print(f"paretotune {args.command}: corrupt journal: {exc}", file=sys.stderr)
        return EXIT_JOURNAL


if __name__ == "__main__":
    sys.exit(main())
