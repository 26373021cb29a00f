"""Benchmark harness: load datasets, run a configured method over each
problem, and reduce the results into accuracy tables, solve-rate reports,
and CSV/JSON artifacts.

Four methods are runnable. CoT and SC are text baselines (one chain /
N voted chains, answers scraped from prose); PoT runs generated code on a
single statement; the reformulating method adds K surface forms on top.
"""

from __future__ import annotations

import concurrent.futures
import csv
import enum
import io
import json
import logging
import os
import re
from dataclasses import dataclass
from decimal import ROUND_FLOOR, ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Mapping, Sequence

from .bank import Bank
from .core import (
    AnswerKind,
    Answer,
    ConfigError,
    DatasetKind,
    GoldAnswer,
    InvalidReason,
    ParseError,
    PipelineConfig,
    PreconditionError,
    Problem,
    ReformMode,
    RmpotError,
    format_decimal,
    decimal_from_text,
    parse_gold_answer,
    validate_config,
)
from .execbox import SandboxRunner
from .gateway import Gateway, user_request
from .pipeline import solve_problem
from .reformulate import ExemplarPair, reformulate
from .solver import ReasoningPath, solve_paths
from .votebox import (
    VoteResult,
    answer_matches_gold,
    invalid_answer,
    majority_vote,
    numeric_answer,
    score,
)

log = logging.getLogger(__name__)


class UnknownKind(RmpotError):
    """The dataset kind is not one of the loadable benchmark formats."""


class Method(enum.Enum):
    """What runs per problem: a text baseline, plain code, or the full
    reformulate-retrieve-code pipeline."""

    COT = "cot"
    SC = "sc"
    POT = "pot"
    RM_POT = "rmpot"

    @property
    def label(self) -> str:
        return _METHOD_LABELS[self]


_METHOD_LABELS = {
    Method.COT: "CoT",
    Method.SC: "SC",
    Method.POT: "PoT",
    Method.RM_POT: "RM-PoT",
}

_MODE_LABELS = {ReformMode.NAIVE: "Naive", ReformMode.IN_CONTEXT: "In-Context"}


# ------------------------------- dataset loading -------------------------------

_KIND_BY_NAME = {
    "gsm8k": DatasetKind.GSM8K,
    "aqua": DatasetKind.AQUA,
    "svamp": DatasetKind.SVAMP,
}

_OPTION_RE = re.compile(r"^\s*([A-E])\s*\)\s*(.*)$")


def _resolve_kind(kind: DatasetKind | str) -> DatasetKind:
    if isinstance(kind, str):
        try:
            return _KIND_BY_NAME[kind.lower()]
        except KeyError:
            raise UnknownKind(f"unknown dataset kind {kind!r}") from None
    if kind not in (DatasetKind.GSM8K, DatasetKind.AQUA, DatasetKind.SVAMP):
        raise UnknownKind(f"cannot load datasets of kind {kind.value!r}")
    return kind


def load_dataset(path: str | Path, kind: DatasetKind | str) -> list[Problem]:
    """Read a benchmark file in its published shape into Problems.

    GSM8K and AQuA are JSONL; SVAMP is one JSON array. Malformed records
    raise ParseError naming the file position; an empty file is a warning,
    not an error.
    """
    kind = _resolve_kind(kind)
    path = str(path)
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip():
        log.warning("dataset file %s is empty", path)
        return []
    if kind is DatasetKind.SVAMP:
        return _load_svamp(path, text)
    loader = _gsm8k_problem if kind is DatasetKind.GSM8K else _aqua_problem
    problems: list[Problem] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            problems.append(loader(record, len(problems)))
        except ParseError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"{path}:{lineno}: bad record: {exc}") from exc
    return problems


def _gsm8k_problem(record: dict, index: int) -> Problem:
    return Problem(
        id=f"gsm8k-{index:05d}",
        text=str(record["question"]),
        gold=parse_gold_answer(str(record["answer"]), DatasetKind.GSM8K),
        dataset_kind=DatasetKind.GSM8K,
    )


def _aqua_problem(record: dict, index: int) -> Problem:
    options: list[tuple[str, str]] = []
    for raw in record["options"]:
        m = _OPTION_RE.match(str(raw))
        if m is None:
            raise ParseError(f"malformed option {raw!r}")
        options.append((m.group(1), m.group(2).strip()))
    return Problem(
        id=f"aqua-{index:05d}",
        text=str(record["question"]),
        options=tuple(options),
        gold=parse_gold_answer(str(record["correct"]), DatasetKind.AQUA),
        dataset_kind=DatasetKind.AQUA,
    )


def _load_svamp(path: str, text: str) -> list[Problem]:
    try:
        records = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(records, list):
        raise ParseError(f"{path}: expected a JSON array of records")
    problems: list[Problem] = []
    for i, record in enumerate(records):
        try:
            body = str(record["Body"]).strip()
            question = str(record["Question"]).strip()
            gold = parse_gold_answer(str(record["Answer"]), DatasetKind.SVAMP)
        except ParseError as exc:
            raise ParseError(f"{path}: record {i + 1}: {exc}") from exc
        except (KeyError, TypeError) as exc:
            raise ParseError(f"{path}: record {i + 1}: missing field {exc}") from exc
        problems.append(
            Problem(
                id=f"svamp-{i:05d}",
                text=f"{body} {question}",
                gold=gold,
                dataset_kind=DatasetKind.SVAMP,
            )
        )
    return problems


# ------------------------------ text baselines ---------------------------------

COT_INSTRUCTION = (
    "Solve the math word problem by reasoning step by step. "
    "Finish with a line of the form: The answer is <value>."
)

_ANSWER_MARKER = "the answer is"
_NUMBER_RE = re.compile(r"[-+]?\$?\d[\d,]*(?:\.\d+)?")
_LETTER_RE = re.compile(r"(?<![A-Za-z])([A-Ea-e])(?![A-Za-z])")


def build_cot_prompt(p: Problem) -> str:
    prompt = f"{COT_INSTRUCTION}\n\nQuestion: {p.text}"
    if p.options:
        lines = "\n".join(f"{label}) {text}" for label, text in p.options)
        prompt += f"\nOptions:\n{lines}"
    return prompt


def extract_final_answer(completion: str, options: Sequence[tuple[str, str]]) -> Answer:
    """Scrape a prose completion's final answer.

    The text after the last "the answer is" wins; a completion with that
    marker but nothing parseable after it is invalid (no rummaging back
    through earlier prose). Without the marker, the last number — or, for
    multiple choice, the last standalone option letter — is taken.
    """
    labels = {label for label, _ in options}
    idx = completion.lower().rfind(_ANSWER_MARKER)
    scope = completion[idx + len(_ANSWER_MARKER):] if idx >= 0 else completion
    if options:
        found = [m.group(1).upper() for m in _LETTER_RE.finditer(scope)]
        found = [letter for letter in found if letter in labels]
        if not found:
            return invalid_answer(InvalidReason.NON_NUMERIC)
        letter = found[0] if idx >= 0 else found[-1]
        return Answer(AnswerKind.CHOICE, choice_label=letter)
    matches = _NUMBER_RE.findall(scope)
    if not matches:
        return invalid_answer(InvalidReason.NON_NUMERIC)
    token = matches[0] if idx >= 0 else matches[-1]
    try:
        return numeric_answer(decimal_from_text(token))
    except ParseError:
        return invalid_answer(InvalidReason.NON_NUMERIC)


# --------------------------------- metrics -------------------------------------

def solve_rate(paths: Sequence[ReasoningPath], gold: GoldAnswer, tol: float) -> float:
    """Fraction of paths whose own answer matches gold."""
    if not paths:
        raise PreconditionError("solve rate needs at least one path")
    hits = sum(1 for path in paths if answer_matches_gold(path.answer, gold, tol))
    return hits / len(paths)


def solve_rate_diff(
    p_paths: Sequence[ReasoningPath],
    pr_paths: Sequence[ReasoningPath],
    gold: GoldAnswer,
    tol: float,
) -> float:
    """Solve rate of the rewritten statement minus the original's."""
    return solve_rate(pr_paths, gold, tol) - solve_rate(p_paths, gold, tol)


def percent(accuracy: float) -> str:
    """One-decimal percentage, round-half-up (0.4375 -> \"43.8\")."""
    return str((Decimal(str(accuracy)) * 100).quantize(Decimal("0.1"), ROUND_HALF_UP))


# ------------------------------ run reports ------------------------------------

@dataclass(slots=True)
class ProblemResult:
    id: str
    correct: bool
    vote: VoteResult | None = None
    error: str | None = None


@dataclass(slots=True)
class RunReport:
    dataset: str
    method: Method
    k: int
    n: int
    reform_mode: ReformMode
    accuracy: float
    n_correct: int
    n_total: int
    per_problem: list[ProblemResult]


@dataclass(slots=True)
class SolveRateReport:
    """Per-problem solve rates: the original statement and each rewrite.
    sr_diff[i] pairs with sr_reformulated[i]."""

    problem_id: str
    sr_original: float
    sr_reformulated: list[float]
    sr_diff: list[float]


def _effective_config(cfg: PipelineConfig, method: Method) -> PipelineConfig:
    if method is Method.COT:
        return cfg.replace(k=1, n=1, reform_mode=ReformMode.NONE)
    if method in (Method.SC, Method.POT):
        return cfg.replace(k=1, reform_mode=ReformMode.NONE)
    if cfg.reform_mode is ReformMode.NONE:
        raise ConfigError("the reformulating method needs a reformulation mode")
    return cfg


def _resolve_workers(cfg: PipelineConfig, n_problems: int) -> int:
    workers = cfg.workers or min(os.cpu_count() or 1, 16)
    return max(1, min(workers, n_problems))


def _solve_text_method(p: Problem, cfg: PipelineConfig, gateway: Gateway) -> VoteResult:
    req = user_request(
        build_cot_prompt(p),
        model=cfg.model,
        temperature=cfg.temperature,
        top_p=cfg.top_p,
        top_k=cfg.top_k,
        n_samples=cfg.n,
        seed_index=0,
    )
    answers = [extract_final_answer(completion, p.options) for completion in gateway.chat(req)]
    return majority_vote(answers, cfg.numeric_tol)


def evaluate(
    problems: Sequence[Problem],
    cfg: PipelineConfig,
    method: Method,
    gateway: Gateway,
    sandbox: SandboxRunner,
    *,
    bank: Bank | None = None,
    exemplars: Sequence[ExemplarPair] | None = None,
    dataset: str = "",
) -> RunReport:
    """Run one method over the problems and score each voted answer.

    Problems run concurrently; a failure inside one problem is recorded on
    its row (scored incorrect) and never aborts the run. Rows come back
    sorted by problem id regardless of completion order.
    """
    if not problems:
        raise PreconditionError("no problems to evaluate")
    eff = validate_config(_effective_config(cfg, method))

    def run_one(p: Problem) -> ProblemResult:
        try:
            if p.gold is None:
                raise PreconditionError(f"problem {p.id} has no gold answer")
            if method in (Method.COT, Method.SC):
                vote = _solve_text_method(p, eff, gateway)
            else:
                vote = solve_problem(p, eff, gateway, sandbox, bank=bank, exemplars=exemplars).vote
            return ProblemResult(id=p.id, correct=score(vote, p.gold, eff.numeric_tol), vote=vote)
        except Exception as exc:
            log.warning("problem %s failed: %s", p.id, exc)
            return ProblemResult(id=p.id, correct=False, error=str(exc))

    workers = _resolve_workers(eff, len(problems))
    if workers == 1:
        results = [run_one(p) for p in problems]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, problems))
    results.sort(key=lambda r: r.id)
    n_correct = sum(1 for r in results if r.correct)
    return RunReport(
        dataset=dataset,
        method=method,
        k=eff.k,
        n=eff.n,
        reform_mode=eff.reform_mode,
        accuracy=n_correct / len(results),
        n_correct=n_correct,
        n_total=len(results),
        per_problem=results,
    )


def ablate(
    problems: Sequence[Problem],
    cfg: PipelineConfig,
    ks: Sequence[int],
    modes: Sequence[ReformMode],
    gateway: Gateway,
    sandbox: SandboxRunner,
    *,
    bank: Bank | None = None,
    exemplars: Sequence[ExemplarPair] | None = None,
    dataset: str = "",
) -> tuple[list[RunReport], dict[tuple[str, int], str]]:
    """One full run per (mode, K) cell with the total path budget N fixed.

    A cell that fails to configure or run is skipped with its error recorded
    under (mode value, K); the remaining cells still complete.
    """
    reports: list[RunReport] = []
    failures: dict[tuple[str, int], str] = {}
    for mode in modes:
        for k in ks:
            cell = cfg.replace(k=k, reform_mode=mode)
            try:
                reports.append(
                    evaluate(
                        problems, cell, Method.RM_POT, gateway, sandbox,
                        bank=bank, exemplars=exemplars, dataset=dataset,
                    )
                )
            except Exception as exc:
                log.warning("ablation cell (%s, K=%d) failed: %s", mode.value, k, exc)
                failures[(mode.value, k)] = str(exc)
    return reports, failures


def compute_solve_rate_report(
    p: Problem,
    cfg: PipelineConfig,
    gateway: Gateway,
    sandbox: SandboxRunner,
    *,
    bank: Bank | None = None,
    exemplars: Sequence[ExemplarPair] | None = None,
) -> SolveRateReport:
    """Solve rates for the original statement and each of its K rewrites.

    Every statement gets the full N-path treatment under a single-form
    configuration, so each rate is an exact fraction over N runs.
    """
    if p.gold is None:
        raise PreconditionError(f"problem {p.id} has no gold answer")
    if cfg.reform_mode is ReformMode.NONE:
        raise ConfigError("solve-rate analysis needs a reformulation mode")
    validate_config(cfg)
    reforms = reformulate(p, cfg, gateway, exemplars)
    base = validate_config(cfg.replace(k=1, reform_mode=ReformMode.NONE))
    if bank is not None:
        from .bank import retrieve_topk

        fewshot = retrieve_topk(p, bank, gateway, cfg.embed_model, k=cfg.fewshot_k)
    else:
        fewshot = []

    def rate(statement: str) -> float:
        paths = solve_paths([statement], base, fewshot, gateway, sandbox, options=p.options)
        return solve_rate(paths, p.gold, base.numeric_tol)

    sr_original = rate(p.text)
    sr_reformulated = [rate(r.text) for r in reforms]
    return SolveRateReport(
        problem_id=p.id,
        sr_original=sr_original,
        sr_reformulated=sr_reformulated,
        sr_diff=[sr - sr_original for sr in sr_reformulated],
    )


# ------------------------------- histogram -------------------------------------

def emit_diff_histogram(reports: Sequence[SolveRateReport], bin_width: float) -> str:
    """CSV of solve-rate-diff counts over right-open bins spanning [-1, 1].

    A diff on a bin edge belongs to the higher bin; 1.0, which has no higher
    bin, lands in the last one. The width must divide 2 evenly.
    """
    width = Decimal(str(bin_width))
    if width <= 0 or Decimal(2) % width != 0:
        raise ConfigError(f"bin width must evenly divide the [-1, 1] range, got {bin_width}")
    n_bins = int(Decimal(2) / width)
    counts = [0] * n_bins
    for report in reports:
        for diff in report.sr_diff:
            idx = int(((Decimal(str(diff)) + 1) / width).to_integral_value(rounding=ROUND_FLOOR))
            counts[min(max(idx, 0), n_bins - 1)] += 1
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["bin_low", "bin_high", "count"])
    for i, count in enumerate(counts):
        low = Decimal(-1) + i * width
        writer.writerow([format_decimal(low), format_decimal(low + width), count])
    return buf.getvalue()


# ----------------------------- table rendering ----------------------------------

def render_main_table(
    values: Mapping[Method, Mapping[str, float]],
    datasets: Sequence[str],
) -> str:
    """Method-by-dataset accuracy CSV, methods in canonical order."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["Method", *datasets])
    for method in Method:
        if method not in values:
            continue
        row = values[method]
        writer.writerow([method.label, *(percent(row[d]) for d in datasets)])
    return buf.getvalue()


def render_ablation_table(
    values: Mapping[tuple[ReformMode, int], Mapping[str, float]],
    datasets: Sequence[str],
) -> str:
    """(Mode, K)-by-dataset accuracy CSV: naive rows first, K ascending."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["Mode", "K", *datasets])
    for mode in (ReformMode.NAIVE, ReformMode.IN_CONTEXT):
        for key in sorted((k for m, k in values if m is mode)):
            row = values[(mode, key)]
            writer.writerow([_MODE_LABELS[mode], key, *(percent(row[d]) for d in datasets)])
    return buf.getvalue()


# ------------------------------ report writers ----------------------------------

def _vote_payload(vote: VoteResult | None) -> dict:
    if vote is None:
        return {"winner": "", "tally": [], "valid": 0, "invalid": 0, "tie_broken": False}
    tally = sorted(
        ({"answer": answer.display(), "votes": votes} for answer, votes in vote.tally.items()),
        key=lambda item: (-item["votes"], item["answer"]),
    )
    return {
        "winner": vote.winner.display(),
        "tally": tally,
        "valid": vote.valid_count,
        "invalid": vote.invalid_count,
        "tie_broken": vote.tie_broken,
    }


def report_payload(report: RunReport) -> dict:
    """The report as plain JSON-ready data (no clocks, no filesystem paths)."""
    return {
        "dataset": report.dataset,
        "method": report.method.label,
        "k": report.k,
        "n": report.n,
        "mode": report.reform_mode.value,
        "accuracy": report.accuracy,
        "accuracy_pct": percent(report.accuracy),
        "n_correct": report.n_correct,
        "n_total": report.n_total,
        "problems": [
            {"id": r.id, "correct": r.correct, "error": r.error, **_vote_payload(r.vote)}
            for r in report.per_problem
        ],
    }


def report_to_json_text(report: RunReport) -> str:
    """Full per-problem detail as deterministic JSON."""
    return json.dumps(report_payload(report), sort_keys=True, indent=2) + "\n"


def summary_csv_text(reports: Sequence[RunReport]) -> str:
    """One row per run, in the main table's column order."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["dataset", "method", "k", "n", "mode", "accuracy_pct", "n_correct", "n_total"])
    for r in reports:
        writer.writerow(
            [r.dataset, r.method.label, r.k, r.n, r.reform_mode.value, percent(r.accuracy), r.n_correct, r.n_total]
        )
    return buf.getvalue()


def problems_csv_text(report: RunReport) -> str:
    """Per-problem outcome rows for one run."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "correct", "winner", "valid", "invalid", "tie_broken", "error"])
    for r in report.per_problem:
        vote = _vote_payload(r.vote)
        writer.writerow(
            [
                r.id,
                "true" if r.correct else "false",
                vote["winner"],
                vote["valid"],
                vote["invalid"],
                "true" if vote["tie_broken"] else "false",
                r.error or "",
            ]
        )
    return buf.getvalue()
