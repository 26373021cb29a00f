"""Command-line entry points: solve one problem, run benchmark evaluations
and ablations, rewrite problem statements, and manage retrieval banks and
the completion cache.

Exit codes: 0 success, 1 configuration/IO failure, 2 a solve produced no
valid answer. Endpoints come from RMPOT_BASE_URL / RMPOT_API_KEY, or a
--mock-script file replaces the provider entirely; RMPOT_CACHE_DIR enables
the on-disk completion cache.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import re
import sys
from pathlib import Path
from typing import Sequence

from .bank import Bank, build_bank, load_bank, retrieve_topk, save_bank
from .core import (
    ConfigError,
    ParseError,
    PipelineConfig,
    PreconditionError,
    Problem,
    ReformMode,
    RmpotError,
    load_config,
)
from .evalharness import (
    Method,
    compute_solve_rate_report,
    ablate,
    emit_diff_histogram,
    evaluate,
    load_dataset,
    percent,
    problems_csv_text,
    render_ablation_table,
    report_payload,
    report_to_json_text,
    summary_csv_text,
)
from .execbox import InlineSandbox, SandboxRunner, ShimSandbox
from .gateway import DiskCache, Gateway, HttpTransport
from .pipeline import solve_problem
from .reformulate import ExemplarPair, load_exemplars, reformulate
from .scripted import ScriptedTransport, load_mock_script

_OPTION_RE = re.compile(r"^\s*([A-Ea-e])\s*\)\s*(.*)$")

_METHOD_NAMES = {
    "cot": Method.COT,
    "sc": Method.SC,
    "pot": Method.POT,
    "rmpot": Method.RM_POT,
    "rm-pot": Method.RM_POT,
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse, but flag mistakes exit 1 (not 2) per the exit-code contract."""

    def error(self, message: str):  # type: ignore[override]
        raise _UsageError(message)


def _config_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", metavar="PATH", help="TOML config file; flags override its values")
    parent.add_argument("--mock-script", metavar="PATH", help="scripted provider file (no network)")
    return parent


def _pipeline_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--k", type=int, help="surface forms per problem (must divide N)")
    parent.add_argument("--n", type=int, help="total reasoning paths per problem")
    parent.add_argument("--mode", choices=["naive", "incontext", "none"], help="reformulation style")
    parent.add_argument("--fewshot", type=int, help="retrieved examples per solver prompt")
    parent.add_argument("--bank", metavar="PATH", help="retrieval bank file")
    parent.add_argument("--exemplars", metavar="PATH", help="rewrite exemplar JSONL for in-context mode")
    parent.add_argument("--workers", type=int, help="concurrent problems (0 = logical cores, max 16)")
    parent.add_argument("--timeout", type=float, metavar="SECS", help="per-program sandbox timeout")
    return parent


def _dataset_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--dataset", metavar="PATH", required=True, help="benchmark file")
    parent.add_argument("--kind", choices=["gsm8k", "aqua", "svamp"], required=True, help="benchmark format")
    parent.add_argument("--limit", type=int, help="evaluate at most this many problems")
    parent.add_argument("--seed", type=int, help="sample the limited subset with this seed")
    parent.add_argument("--out", metavar="DIR", default=".", help="directory for report files")
    return parent


def build_parser() -> _Parser:
    parser = _Parser(prog="rmpot", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    config, pipeline, dataset = _config_parent(), _pipeline_parent(), _dataset_parent()
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    solve = commands.add_parser("solve", parents=[config, pipeline], help="solve one problem end to end")
    solve.add_argument("--text", required=True, help="the problem statement")
    solve.add_argument("--option", action="append", metavar="'A) 21'", help="answer option (repeatable)")
    solve.set_defaults(func=cmd_solve)

    ev = commands.add_parser("eval", parents=[config, pipeline, dataset], help="run methods over a benchmark")
    ev.add_argument("--methods", default="rmpot", help="comma list of cot,sc,pot,rmpot")
    ev.add_argument("--diff-hist", action="store_true", help="also compute per-problem solve-rate diffs")
    ev.add_argument("--bin-width", type=float, default=0.25, help="histogram bin width over [-1,1]")
    ev.set_defaults(func=cmd_eval)

    ab = commands.add_parser("ablate", parents=[config, pipeline, dataset], help="K x mode grid of runs")
    ab.add_argument("--ks", default="1,2,4", help="comma list of K values")
    ab.add_argument("--modes", default="naive,incontext", help="comma list of reformulation modes")
    ab.set_defaults(func=cmd_ablate)

    reform = commands.add_parser("reformulate", parents=[config, pipeline], help="print K rewrites of a problem")
    reform.add_argument("--text", required=True, help="the problem statement")
    reform.set_defaults(func=cmd_reformulate)

    bank_build = commands.add_parser("bank-build", parents=[config], help="embed worked examples into a bank")
    bank_build.add_argument("--input", required=True, metavar="PATH", help="JSONL of question/solution/domain")
    bank_build.add_argument("--out", required=True, metavar="PATH", help="bank file to write")
    bank_build.set_defaults(func=cmd_bank_build)

    bank_query = commands.add_parser("bank-query", parents=[config], help="retrieve nearest bank entries")
    bank_query.add_argument("--bank", required=True, metavar="PATH", help="bank file")
    bank_query.add_argument("--text", required=True, help="query problem text")
    bank_query.add_argument("--k", type=int, default=5, help="entries to return")
    bank_query.set_defaults(func=cmd_bank_query)

    commands.add_parser("cache-stats", help="show completion-cache size").set_defaults(func=cmd_cache_stats)
    commands.add_parser("cache-clear", help="delete all cached completions").set_defaults(func=cmd_cache_clear)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (RmpotError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


# ------------------------------ shared wiring ------------------------------------

_PIPELINE_OVERRIDE_KEYS = {
    "k": "k",
    "n": "n",
    "mode": "reform_mode",
    "fewshot": "fewshot_k",
    "workers": "workers",
    "timeout": "sandbox_timeout_s",
}


def _load_cfg(args: argparse.Namespace) -> PipelineConfig:
    overrides = {
        cfg_key: getattr(args, flag)
        for flag, cfg_key in _PIPELINE_OVERRIDE_KEYS.items()
        if getattr(args, flag, None) is not None
    }
    return load_config(getattr(args, "config", None), overrides)


def _build_gateway(args: argparse.Namespace, cfg: PipelineConfig) -> Gateway:
    cache_dir = os.environ.get("RMPOT_CACHE_DIR")
    cache = DiskCache(cache_dir) if cache_dir else None
    if getattr(args, "mock_script", None):
        return Gateway(ScriptedTransport(load_mock_script(args.mock_script)), cache)
    base_url = os.environ.get("RMPOT_BASE_URL")
    if not base_url:
        raise ConfigError("no provider configured: set RMPOT_BASE_URL or pass --mock-script")
    transport = HttpTransport(
        base_url,
        os.environ.get("RMPOT_API_KEY", ""),
        send_top_k=cfg.send_top_k,
    )
    return Gateway(transport, cache)


def _build_sandbox(cfg: PipelineConfig) -> SandboxRunner:
    return ShimSandbox(cfg.shim_path) if cfg.shim_path else InlineSandbox()


def _setup(args: argparse.Namespace) -> tuple[PipelineConfig, Gateway, SandboxRunner, Bank | None, list[ExemplarPair] | None]:
    cfg = _load_cfg(args)
    gateway = _build_gateway(args, cfg)
    sandbox = _build_sandbox(cfg)
    bank = load_bank(args.bank) if getattr(args, "bank", None) else None
    exemplars = load_exemplars(args.exemplars) if getattr(args, "exemplars", None) else None
    return cfg, gateway, sandbox, bank, exemplars


def _print_stats(gateway: Gateway) -> None:
    print(f"[stats] {gateway.stats_line()}", file=sys.stderr)


def _load_problems(args: argparse.Namespace) -> list[Problem]:
    problems = load_dataset(args.dataset, args.kind)
    limit = getattr(args, "limit", None)
    if limit is not None and 0 < limit < len(problems):
        if getattr(args, "seed", None) is not None:
            picks = sorted(random.Random(args.seed).sample(range(len(problems)), limit))
            problems = [problems[i] for i in picks]
        else:
            problems = problems[:limit]
    return problems


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_methods(raw: str) -> list[Method]:
    methods = []
    for token in raw.split(","):
        token = token.strip().lower()
        if not token:
            continue
        if token not in _METHOD_NAMES:
            raise ConfigError(f"unknown method {token!r} (expected cot|sc|pot|rmpot)")
        methods.append(_METHOD_NAMES[token])
    if not methods:
        raise ConfigError("no methods requested")
    return methods


def _parse_options(raw: Sequence[str] | None) -> tuple[tuple[str, str], ...]:
    options = []
    for item in raw or ():
        m = _OPTION_RE.match(item)
        if m is None:
            raise ConfigError(f"malformed option {item!r}; expected something like 'A) 21'")
        options.append((m.group(1).upper(), m.group(2).strip()))
    return tuple(options)


# -------------------------------- commands ----------------------------------------

def cmd_solve(args: argparse.Namespace) -> int:
    cfg, gateway, sandbox, bank, exemplars = _setup(args)
    problem = Problem(id="cli", text=args.text, options=_parse_options(args.option))
    outcome = solve_problem(problem, cfg, gateway, sandbox, bank=bank, exemplars=exemplars)
    vote = outcome.vote
    assert vote is not None
    print(f"winner: {vote.winner.display()}" + (" (tie broken)" if vote.tie_broken else ""))
    print(f"valid paths: {vote.valid_count}/{len(outcome.paths)}")
    for answer, votes in sorted(vote.tally.items(), key=lambda item: (-item[1], item[0].display())):
        print(f"  {answer.display()}: {votes}")
    print("form  path  status        answer")
    for j, path in enumerate(outcome.paths):
        status = path.exec.status.value if path.exec is not None else path.answer.invalid_reason.value
        print(f"{path.source_form:>4}  {j:>4}  {status:<12}  {path.answer.display()}")
    _print_stats(gateway)
    return 0 if vote.valid_count > 0 else 2


def cmd_eval(args: argparse.Namespace) -> int:
    cfg, gateway, sandbox, bank, exemplars = _setup(args)
    problems = _load_problems(args)
    methods = _parse_methods(args.methods)
    out = _out_dir(args)
    reports = []
    for method in methods:
        report = evaluate(
            problems, cfg, method, gateway, sandbox,
            bank=bank, exemplars=exemplars, dataset=args.kind,
        )
        reports.append(report)
        print(
            f"{args.kind} {method.label}: accuracy {percent(report.accuracy)}% "
            f"({report.n_correct}/{report.n_total})"
        )
    if len(reports) == 1:
        (out / "report.json").write_text(report_to_json_text(reports[0]), encoding="utf-8")
        (out / "problems.csv").write_text(problems_csv_text(reports[0]), encoding="utf-8")
    else:
        text = json.dumps([report_payload(r) for r in reports], sort_keys=True, indent=2) + "\n"
        (out / "report.json").write_text(text, encoding="utf-8")
        for report in reports:
            name = f"problems-{report.method.value}.csv"
            (out / name).write_text(problems_csv_text(report), encoding="utf-8")
    (out / "summary.csv").write_text(summary_csv_text(reports), encoding="utf-8")
    if args.diff_hist:
        sr_reports = [
            compute_solve_rate_report(p, cfg, gateway, sandbox, bank=bank, exemplars=exemplars)
            for p in problems
        ]
        (out / "diff_hist.csv").write_text(emit_diff_histogram(sr_reports, args.bin_width), encoding="utf-8")
    _print_stats(gateway)
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg, gateway, sandbox, bank, exemplars = _setup(args)
    problems = _load_problems(args)
    try:
        ks = [int(token) for token in args.ks.split(",") if token.strip()]
    except ValueError:
        raise ConfigError(f"bad --ks value {args.ks!r}; expected comma-separated integers") from None
    modes = [_cli_mode(token) for token in args.modes.split(",") if token.strip()]
    if not ks or not modes:
        raise ConfigError("ablation needs at least one K and one mode")
    out = _out_dir(args)
    reports, failures = ablate(
        problems, cfg, ks, modes, gateway, sandbox,
        bank=bank, exemplars=exemplars, dataset=args.kind,
    )
    for (mode, k), message in failures.items():
        print(f"cell {mode} K={k} failed: {message}", file=sys.stderr)
    for report in reports:
        print(
            f"{args.kind} {report.reform_mode.value} K={report.k}: "
            f"accuracy {percent(report.accuracy)}% ({report.n_correct}/{report.n_total})"
        )
    values = {(r.reform_mode, r.k): {args.kind: r.accuracy} for r in reports}
    (out / "ablation.csv").write_text(render_ablation_table(values, [args.kind]), encoding="utf-8")
    (out / "summary.csv").write_text(summary_csv_text(reports), encoding="utf-8")
    text = json.dumps([report_payload(r) for r in reports], sort_keys=True, indent=2) + "\n"
    (out / "report.json").write_text(text, encoding="utf-8")
    _print_stats(gateway)
    return 0 if reports else 1


def _cli_mode(token: str) -> ReformMode:
    from .core import _parse_mode  # shared coercion with config files

    return _parse_mode(token.strip())


def cmd_reformulate(args: argparse.Namespace) -> int:
    cfg, gateway, _, _, exemplars = _setup(args)
    problem = Problem(id="cli", text=args.text)
    for form in reformulate(problem, cfg, gateway, exemplars):
        suffix = "  [degenerate]" if form.degenerate else ""
        print(f"form {form.index}: {form.text}{suffix}")
    _print_stats(gateway)
    return 0


def _read_pairs(path: str) -> list[dict]:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: bad pair record: {exc}") from exc
            if not isinstance(record, dict) or not {"question", "solution", "domain"} <= record.keys():
                raise ParseError(f"{path}:{lineno}: pair needs question/solution/domain fields")
            pairs.append(record)
    return pairs


def cmd_bank_build(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    gateway = _build_gateway(args, cfg)
    pairs = _read_pairs(args.input)
    bank = build_bank(pairs, gateway, model=cfg.embed_model)
    save_bank(bank, args.out)
    print(f"built bank {args.out}: {len(bank.entries)} entries, {len(bank.domains)} domains")
    _print_stats(gateway)
    return 0


def cmd_bank_query(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    gateway = _build_gateway(args, cfg)
    bank = load_bank(args.bank)
    problem = Problem(id="query", text=args.text)
    for entry in retrieve_topk(problem, bank, gateway, cfg.embed_model, k=args.k):
        print(f"{entry.id}\t{entry.domain}\t{entry.question}")
    _print_stats(gateway)
    return 0


def _require_cache() -> DiskCache:
    directory = os.environ.get("RMPOT_CACHE_DIR")
    if not directory:
        raise ConfigError("RMPOT_CACHE_DIR is not set; nothing to inspect")
    return DiskCache(directory)


def cmd_cache_stats(args: argparse.Namespace) -> int:
    count, total = _require_cache().stats()
    print(f"records={count} bytes={total}")
    return 0


def cmd_cache_clear(args: argparse.Namespace) -> int:
    removed = _require_cache().clear()
    print(f"removed {removed} cache records")
    return 0


if __name__ == "__main__":
    sys.exit(main())
