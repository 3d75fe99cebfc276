"""Command-line entry point: ``cdr simulate | route | train-policy | report``.

Exit codes: 0 success, 2 validation error, 3 runtime or data error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import asdict
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Sequence


from cdr.bench import (
    METRIC_COLUMNS,
    compare_all,
    corpus_features,
    generate_corpus,
    oracle_labels,
    train_policies,
)
from cdr.errors import CdrError, ConfigError, InvalidInputError
from cdr.features import CorrelationModel, extract_features
from cdr.routing import dumps_policy, fit_linear, fit_neural, fit_tree, loads_policy, route, score, training_accuracy
from cdr.serialize import (
    AppConfig,
    dumps_corpus,
    dumps_line,
    decision_to_dict,
    error_sentinel,
    iter_lines,
    loads_config,
    loads_corpus,
    manifest,
    parse_query_line,
    sha256_bytes,
)

log = logging.getLogger("cdr")

EXIT_OK, EXIT_VALIDATION, EXIT_DATA, EXIT_IO = 0, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    """Bad command-line values; maps to the validation exit code."""


def _package_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def _read_text(path: str | Path) -> str:
    if str(path) == "-":
        return sys.stdin.read()
    return Path(path).read_text(encoding="utf-8")


def _write_bytes(path: Path, data: bytes) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return sha256_bytes(data)


def _emit(text: str, output: str | None) -> None:
    if output in (None, "-"):
        sys.stdout.write(text)
    else:
        p = Path(output)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")


def load_config(args) -> AppConfig:
    cfg = loads_config(_read_text(args.config)) if args.config else AppConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["output_dir"] = args.out
    if updates:
        cfg = AppConfig.model_validate({**cfg.model_dump(), **updates})
    return cfg


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = load_config(args)
    out = Path(cfg.output_dir)
    engines = cfg.engines.build()
    clustering = cfg.features.build()
    seed = cfg.seed

    log.info("generating corpora (seed %d)", seed)
    train = generate_corpus(cfg.train_spec(), engines, split=1)
    corpus = generate_corpus(cfg.corpus_spec(), engines, split=0)

    kinds = list(dict.fromkeys(cfg.policy.kinds))
    policies = {}
    if kinds:
        log.info("training policies: %s", ", ".join(kinds))
        policies = train_policies(
            train, kinds, corpus_features(train, clustering=clustering),
            linear_config=cfg.policy.linear.build(seed),
            neural_config=cfg.policy.neural.build(seed),
            hidden=tuple(cfg.policy.neural.hidden),
            max_depth=cfg.policy.tree_max_depth,
        )

    b = cfg.bench
    report = compare_all(
        corpus, engines, policies, repeats=b.repeats, seed=seed, baselines=b.baselines,
        threshold=cfg.threshold.build(), n_resamples=b.bootstrap_resamples, ece_bins=b.ece_bins,
        confidence_threshold=b.confidence_threshold,
        features=corpus_features(corpus, clustering=clustering),
    )

    hashes = {
        "corpus.jsonl": _write_bytes(out / "corpus.jsonl", dumps_corpus(corpus).encode()),
        "metrics.csv": _write_bytes(out / "metrics.csv", report.metrics_csv().encode()),
        "confusion.csv": _write_bytes(out / "confusion.csv", report.confusion_csv().encode()),
    }
    for kind, policy in sorted(policies.items()):
        name = f"policies/{kind}.json"
        hashes[name] = _write_bytes(out / name, dumps_policy(policy).encode())
    traces = {k: r.tau_trace for k, r in report.runs.items() if r.tau_trace is not None}
    if traces:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["baseline", "repeat", "index", "tau"])
        for name, trace in traces.items():
            for r, row in enumerate(trace):
                for i, tau in enumerate(row):
                    w.writerow([name, r, i, repr(float(tau))])
        hashes["tau_trace.csv"] = _write_bytes(out / "tau_trace.csv", buf.getvalue().encode())
    doc = manifest(cfg, hashes, _package_version())
    _write_bytes(out / "manifest.json", doc.encode())

    if args.plot:
        from cdr import plotting

        rows = [asdict(r) for r in report.rows]
        plotting.accuracy_vs_tokens(rows, out / "figures" / "accuracy_vs_tokens.png")
        plotting.metric_bars(rows, "mean_tokens", out / "figures" / "mean_tokens.png", "mean tokens per query")
        for name, trace in traces.items():
            plotting.tau_trajectory(trace, out / "figures" / f"tau_{name}.png")

    if not args.quiet:
        rows, columns = summarize([asdict(r) for r in report.rows], list(METRIC_COLUMNS))
        print(format_table(rows, columns))
        print(f"artifacts written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# route
# ---------------------------------------------------------------------------


def cmd_route(args) -> int:
    cfg = load_config(args)
    tau = cfg.threshold.tau0 if args.tau is None else args.tau
    if not math.isfinite(tau):
        raise UsageError("--tau must be finite")
    policy = loads_policy(_read_text(args.policy))
    model = None
    if args.correlation_model:
        try:
            model = CorrelationModel.from_dict(json.loads(_read_text(args.correlation_model)))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed correlation model: {exc}") from exc
    clustering = cfg.features.build()

    lines, seen = [], set()
    for no, line in iter_lines(_read_text(args.queries)):
        qid = None
        try:
            q = parse_query_line(line)
            qid = q.id
            if q.id in seen:
                raise InvalidInputError(f"duplicate query id {q.id!r}")
            seen.add(q.id)
            feats = extract_features(q, model, clustering)
            decision = route(score(policy, feats), tau, feats)
        except CdrError as exc:
            if not args.keep_going:
                raise InvalidInputError(f"{args.queries}: line {no}: {exc}") from exc
            log.warning("line %d: %s", no, exc)
            lines.append(dumps_line(error_sentinel(no, str(exc), qid)))
            continue
        lines.append(dumps_line(decision_to_dict(q.id, decision)))
    _emit("".join(lines), args.output)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-policy
# ---------------------------------------------------------------------------


def cmd_train_policy(args) -> int:
    cfg = load_config(args)
    corpus = loads_corpus(_read_text(args.corpus))
    if not corpus:
        raise InvalidInputError("corpus is empty")
    if any(q.oracle_label is None for q in corpus):
        raise InvalidInputError("corpus lacks oracle labels")
    x = corpus_features(corpus, clustering=cfg.features.build())
    y = oracle_labels(corpus)
    p = cfg.policy
    if args.kind == "linear":
        tc = p.linear.build(cfg.seed)
        policy = fit_linear(x, y, _override(tc, args))
    elif args.kind == "neural":
        hidden = tuple(args.hidden) if args.hidden else tuple(p.neural.hidden)
        policy = fit_neural(x, y, _override(p.neural.build(cfg.seed), args), hidden)
    else:
        depth = p.tree_max_depth if args.max_depth is None else args.max_depth
        if depth < 0:
            raise UsageError("--max-depth must be >= 0")
        policy = fit_tree(x, y, depth)
    acc = training_accuracy(policy, x, y)
    output = args.output or str(Path(cfg.output_dir) / f"policy_{args.kind}.json")
    _emit(dumps_policy(policy), output)
    print(f"training accuracy: {acc:.4f}")
    if not args.quiet and output != "-":
        print(f"policy written to {output}")
    return EXIT_OK


def _override(tc, args):
    from dataclasses import replace

    changes = {k: getattr(args, k) for k in ("learning_rate", "epochs", "batch_size") if getattr(args, k) is not None}
    try:
        return replace(tc, **changes)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    cells = [list(columns)] + [[_cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(s.ljust(w) if i == 0 else s.rjust(w) for i, (s, w) in enumerate(zip(row, widths)))
             for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def parse_report_table(text: str) -> tuple[list[dict], list[str]]:
    """Parse a metrics table into rows of floats (``None`` for empty cells).

    Returns the rows and the list of columns in file order. Raises
    :class:`InvalidInputError` on a missing ``baseline`` or ``mean_tokens``
    column, a ragged row, or a non-numeric metric.
    """
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise InvalidInputError("metrics table is empty") from None
    for required in ("baseline", "mean_tokens"):
        if required not in header:
            raise InvalidInputError(f"metrics table lacks a {required!r} column")
    if len(set(header)) != len(header):
        raise InvalidInputError("metrics table has duplicate columns")
    rows = []
    for no, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise InvalidInputError(f"line {no}: expected {len(header)} cells, found {len(rec)}")
        row = {}
        for col, v in zip(header, rec):
            if col == "baseline":
                row[col] = v
                continue
            try:
                row[col] = float(v) if v != "" else None
            except ValueError:
                raise InvalidInputError(f"line {no}: column {col!r} is not numeric: {v!r}") from None
        if row["mean_tokens"] is None:
            raise InvalidInputError(f"line {no}: mean_tokens is empty")
        rows.append(row)
    return rows, header


def summarize(rows: list[dict], header: list[str]) -> tuple[list[dict], list[str]]:
    """Choose report columns and add token savings against ``uniform_slow``."""
    unknown = [c for c in header if c not in METRIC_COLUMNS]
    for c in unknown:
        log.warning("unknown column %r passed through", c)
    shown = ["baseline", "accuracy", "accuracy_ci_low", "accuracy_ci_high", "consistency", "mean_tokens",
             "tokens_ci_low", "tokens_ci_high", "mean_latency_s", "ece", "routing_accuracy"]
    columns = [c for c in shown if c in header]
    slow = [r for r in rows if r["baseline"] == "uniform_slow"]
    if slow and len(rows) > 1:
        ref = slow[0]["mean_tokens"]
        for r in rows:
            r["savings"] = 1.0 - r["mean_tokens"] / ref if ref else None
        columns.append("savings")
        for lo, hi in (("savings_ci_low", "savings_ci_high"),):
            if lo in header and hi in header:
                columns += [lo, hi]
    return rows, columns + unknown


def cmd_report(args) -> int:
    rows, header = parse_report_table(_read_text(args.metrics))
    rows, columns = summarize(rows, header)
    print(format_table(rows, columns))
    if args.plot:
        from cdr import plotting

        out = Path(args.out) if args.out else Path(args.metrics).resolve().parent
        a = plotting.accuracy_vs_tokens(rows, out / "accuracy_vs_tokens.png") if "accuracy" in header else None
        b = plotting.metric_bars(rows, "mean_tokens", out / "mean_tokens.png", "mean tokens per query")
        if not args.quiet:
            for p in (a, b):
                if p is not None:
                    print(f"wrote {p}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and main
# ---------------------------------------------------------------------------


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _hidden(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not sizes or any(s < 1 for s in sizes):
        raise argparse.ArgumentTypeError("hidden layer sizes must be positive")
    return sizes


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=d, help="YAML configuration or run manifest")
    p.add_argument("--seed", type=_seed, metavar="U64", default=d, help="master seed (overrides config)")
    p.add_argument("--out", metavar="DIR", default=d, help="output directory (overrides config)")
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="print only essential output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdr", description="Fast/slow reasoning router: simulate, train, route, report.")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="run the benchmark and write artifacts")
    p.add_argument("--plot", action="store_true", help="also write figures")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("route", parents=[common], help="route a file of queries with a policy")
    p.add_argument("queries", help="line-delimited JSON queries ('-' for stdin)")
    p.add_argument("policy", help="policy JSON file")
    p.add_argument("--tau", type=float, help="routing threshold (default: config tau0)")
    p.add_argument("-o", "--output", help="decisions file (default: stdout)")
    p.add_argument("--keep-going", action="store_true", help="write an error line for bad input and continue")
    p.add_argument("--correlation-model", metavar="PATH", help="model for queries given as embeddings")
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("train-policy", parents=[common], help="fit a routing policy on a labelled corpus")
    p.add_argument("corpus", help="corpus file written by 'simulate'")
    p.add_argument("--kind", choices=("linear", "neural", "tree"), required=True)
    p.add_argument("--max-depth", type=int, help="tree depth")
    p.add_argument("--hidden", type=_hidden, help="neural hidden sizes, e.g. 8 or 16,8")
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("-o", "--output", help="policy file (default: OUT/policy_KIND.json)")
    p.set_defaults(func=cmd_train_policy)

    p = sub.add_parser("report", parents=[common], help="summarize a metrics table")
    p.add_argument("metrics", help="metrics CSV")
    p.add_argument("--plot", action="store_true", help="write figures next to the table (or to --out)")
    p.set_defaults(func=cmd_report)
    return parser


def _configure_logging(quiet: bool) -> None:
    level = LOG_LEVELS.get(os.environ.get("CDR_LOG", "").lower(), logging.ERROR if quiet else logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    _configure_logging(args.quiet)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"cdr: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except CdrError as exc:
        print(f"cdr: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except json.JSONDecodeError as exc:
        print(f"cdr: error: invalid JSON: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"cdr: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
