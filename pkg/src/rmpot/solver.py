"""Program-of-thoughts solving: prompt the model for code, run it, collect paths.

Each problem is solved as N independent reasoning paths spread evenly over the
K surface forms (form i draws samples seed_index i*(N/K) .. (i+1)*(N/K)-1, so
cached replays are stable regardless of batching). A path never aborts the
batch: extraction misses become NO_CODE answers, sandbox failures become
EXEC_ERROR/TIMEOUT/MISSING_VAR answers, and a dead gateway fills the affected
form's slots with EXEC_ERROR placeholders so voting always sees N paths.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from decimal import Decimal
from typing import Protocol, Sequence

from .core import (
    Answer,
    AnswerKind,
    InvalidReason,
    ParseError,
    PipelineConfig,
    PreconditionError,
    decimal_from_text,
)
from .execbox import ExecOutcome, ExecStatus, SandboxRunner
from .gateway import Gateway, GatewayError, user_request
from .votebox import invalid_answer, normalize_answer

log = logging.getLogger(__name__)

SOLVER_INSTRUCTION = (
    "Write a program that solves the problem; store the final numeric answer "
    "in a variable named {result_var}; output only code in one fenced block."
)

CHOICE_INSTRUCTION = (
    "A program computed the value {value} for the problem below. "
    "Pick the option closest to that value and reply with its letter only."
)

# First fenced block: ```-opener line (tag ignored), body runs to the first
# bare ``` line or to the end of the text when the fence is never closed.
_FENCE_RE = re.compile(
    r"^[ \t]*```[^\n]*\n"
    r"((?:(?![ \t]*```[ \t]*$)[^\n]*\n?)*)"
    r"(?:[ \t]*```[ \t]*$)?",
    re.M,
)

# Assignment heuristic: comma-separated identifier-ish targets, then '=' that
# is not '=='. Deliberately narrow so prose ("Let x = 5, ...") stays prose.
_ASSIGN_RE = re.compile(r"[A-Za-z_][\w.\[\]'\"]*(\s*,\s*[A-Za-z_][\w.\[\]'\"]*)*\s*=(?!=)")

_LETTER_RE = re.compile(r"(?<![A-Za-z])([A-Ea-e])(?![A-Za-z])")


class FewshotEntry(Protocol):
    """Anything carrying a question and its solution code (see the bank)."""

    question: str
    solution: str


@dataclass(frozen=True, slots=True)
class ReasoningPath:
    """One sampled completion and everything derived from it."""

    source_form: int
    raw_completion: str
    code: str | None
    exec: ExecOutcome | None
    answer: Answer


def build_solver_prompt(text: str, fewshot: Sequence[FewshotEntry], result_var: str) -> str:
    if not result_var.isidentifier():
        raise PreconditionError(f"result_var must be a Python identifier, got {result_var!r}")
    parts = [SOLVER_INSTRUCTION.format(result_var=result_var), "\n\n"]
    for shot in fewshot:
        parts.append(f"Question: {shot.question}\nSolution:\n```\n{shot.solution}\n```\n\n")
    parts.append(f"Question: {text}")
    return "".join(parts)


def extract_code(completion: str) -> str | None:
    """Pull the program out of a completion; None when there is none."""
    match = _FENCE_RE.search(completion)
    if match:
        code = match.group(1).rstrip("\n")
        return code if code.strip() else None
    for line in completion.split("\n"):
        if not line.strip():
            continue
        stripped = line.lstrip()
        if stripped.startswith(("import ", "from ", "def ")) or _ASSIGN_RE.match(stripped):
            return completion
        return None
    return None


def _all_numeric(options: Sequence[tuple[str, str]]) -> list[tuple[str, Decimal]] | None:
    parsed: list[tuple[str, Decimal]] = []
    for label, text in options:
        try:
            parsed.append((label, decimal_from_text(text)))
        except ParseError:
            return None
    return parsed


def resolve_choice(
    answer: Answer,
    options: Sequence[tuple[str, str]],
    gateway: Gateway,
    cfg: PipelineConfig,
) -> Answer:
    """Map a numeric answer onto the option set.

    When every option is itself a number the nearest one wins locally (ties to
    the smaller letter) with no model call; otherwise the model is asked to
    pick and its reply is parsed for a letter.
    """
    if answer.kind is not AnswerKind.NUMERIC or not options:
        return answer
    assert answer.numeric_value is not None
    if not cfg.choice_via_llm:
        parsed = _all_numeric(options)
        if parsed is not None:
            best = min(parsed, key=lambda it: (abs(it[1] - answer.numeric_value), it[0]))
            return Answer(AnswerKind.CHOICE, choice_label=best[0])
    rendered = "\n".join(f"{label}) {text}" for label, text in options)
    prompt = (
        CHOICE_INSTRUCTION.format(value=answer.display())
        + f"\n\nOptions:\n{rendered}\n\nLetter:"
    )
    req = user_request(
        prompt,
        model=cfg.model,
        temperature=cfg.temperature,
        top_p=cfg.top_p,
        top_k=cfg.top_k,
        n_samples=1,
        seed_index=0,
    )
    reply = gateway.chat(req)[0]
    match = _LETTER_RE.search(reply)
    if not match:
        return invalid_answer(InvalidReason.NON_NUMERIC)
    letter = match.group(1).upper()
    if not any(label == letter for label, _ in options):
        return invalid_answer(InvalidReason.NON_NUMERIC)
    return Answer(AnswerKind.CHOICE, choice_label=letter)


def _filler_path(form_index: int) -> ReasoningPath:
    return ReasoningPath(
        source_form=form_index,
        raw_completion="",
        code=None,
        exec=None,
        answer=invalid_answer(InvalidReason.EXEC_ERROR),
    )


def solve_paths(
    forms: Sequence[str],
    cfg: PipelineConfig,
    fewshot: Sequence[FewshotEntry],
    gateway: Gateway,
    sandbox: SandboxRunner,
    options: Sequence[tuple[str, str]] = (),
) -> list[ReasoningPath]:
    """Produce exactly cfg.n paths, cfg.n // cfg.k per surface form."""
    if len(forms) != cfg.k:
        raise PreconditionError(f"expected {cfg.k} forms, got {len(forms)}")
    n_per = cfg.n // cfg.k
    paths: list[ReasoningPath] = []
    for i, form in enumerate(forms):
        prompt = build_solver_prompt(form, fewshot, cfg.result_var)
        req = user_request(
            prompt,
            model=cfg.model,
            temperature=cfg.temperature,
            top_p=cfg.top_p,
            top_k=cfg.top_k,
            n_samples=n_per,
            seed_index=i * n_per,
        )
        try:
            completions = gateway.chat(req)
        except GatewayError as exc:
            log.warning("form %d: gateway failed (%s); filling %d paths as invalid", i, exc, n_per)
            paths.extend(_filler_path(i) for _ in range(n_per))
            continue
        for completion in completions:
            paths.append(_solve_one(i, completion, cfg, gateway, sandbox, options))
    return paths


def _solve_one(
    form_index: int,
    completion: str,
    cfg: PipelineConfig,
    gateway: Gateway,
    sandbox: SandboxRunner,
    options: Sequence[tuple[str, str]],
) -> ReasoningPath:
    code = extract_code(completion)
    if code is None:
        return ReasoningPath(
            source_form=form_index,
            raw_completion=completion,
            code=None,
            exec=None,
            answer=invalid_answer(InvalidReason.NO_CODE),
        )
    outcome = sandbox.run(code, cfg.result_var, cfg.sandbox_timeout_s, cfg.mem_limit_mb)
    answer = normalize_answer(outcome, options, cfg.numeric_tol)
    if answer.kind is AnswerKind.NUMERIC and options:
        try:
            answer = resolve_choice(answer, options, gateway, cfg)
        except GatewayError:
            log.warning("form %d: choice resolution failed; marking path invalid", form_index)
            answer = invalid_answer(InvalidReason.EXEC_ERROR)
    return ReasoningPath(
        source_form=form_index,
        raw_completion=completion,
        code=code,
        exec=outcome,
        answer=answer,
    )
