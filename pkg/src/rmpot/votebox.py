"""Self-consistency voting over reasoning paths.

Answers are normalized before voting: numeric values are rounded to six
significant digits (round-half-even) so float noise from different programs
collapses into one bucket, and two numerics still count as the same answer
when they agree within a relative tolerance (absolute floor 1). INVALID
answers are never equivalent to anything, including another INVALID, and never
receive votes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import Context, Decimal, InvalidOperation, ROUND_HALF_EVEN
from typing import Sequence

from .core import Answer, AnswerKind, GoldAnswer, InvalidReason
from .execbox import ExecOutcome, ExecStatus

_SIX_SIG = Context(prec=6, rounding=ROUND_HALF_EVEN)

_CHOICE_TEXT_RE = re.compile(r"^\(?\s*([A-Ea-e])\s*\)?\.?$")

_STATUS_TO_REASON = {
    ExecStatus.SYNTAX_ERROR: InvalidReason.EXEC_ERROR,
    ExecStatus.RUNTIME_ERROR: InvalidReason.EXEC_ERROR,
    ExecStatus.SANDBOX_FAILURE: InvalidReason.EXEC_ERROR,
    ExecStatus.TIMEOUT: InvalidReason.TIMEOUT,
    ExecStatus.MISSING_VAR: InvalidReason.MISSING_VAR,
}


def canonical_numeric(value: Decimal) -> Decimal:
    """Round to 6 significant digits (half-even) and normalize, so equal
    answers are represented identically."""
    rounded = _SIX_SIG.plus(value)
    if rounded == 0:
        return Decimal("0")
    return rounded.normalize()


def numeric_answer(value: Decimal) -> Answer:
    return Answer(AnswerKind.NUMERIC, numeric_value=canonical_numeric(value))


def invalid_answer(reason: InvalidReason) -> Answer:
    return Answer(AnswerKind.INVALID, invalid_reason=reason)


def normalize_answer(exec_outcome: ExecOutcome, options: Sequence[tuple[str, str]], tol: float) -> Answer:
    """Map an execution outcome to a canonical Answer.

    OK numerics canonicalize; OK non-numerics are read as a choice letter when
    the problem has options, otherwise they are NON_NUMERIC. Failure statuses
    map onto the invalid reasons (timeouts stay timeouts; the var-missing case
    stays distinct; every other failure is an execution error).
    """
    if exec_outcome.status is not ExecStatus.OK:
        return invalid_answer(_STATUS_TO_REASON[exec_outcome.status])
    if exec_outcome.value_is_numeric and exec_outcome.value is not None:
        try:
            return numeric_answer(Decimal(exec_outcome.value))
        except InvalidOperation:
            return invalid_answer(InvalidReason.NON_NUMERIC)
    if options and exec_outcome.value is not None:
        match = _CHOICE_TEXT_RE.match(exec_outcome.value.strip())
        if match:
            letter = match.group(1).upper()
            if any(label == letter for label, _ in options):
                return Answer(AnswerKind.CHOICE, choice_label=letter)
    return invalid_answer(InvalidReason.NON_NUMERIC)


def answers_equivalent(a: Answer, b: Answer, tol: float) -> bool:
    """Equality for voting. Numeric closeness is relative with floor 1:
    |a-b| <= tol * max(1, |a|, |b|)."""
    if a.kind is AnswerKind.INVALID or b.kind is AnswerKind.INVALID:
        return False
    if a.kind is not b.kind:
        return False
    if a.kind is AnswerKind.CHOICE:
        return a.choice_label == b.choice_label
    assert a.numeric_value is not None and b.numeric_value is not None
    diff = abs(a.numeric_value - b.numeric_value)
    bound = Decimal(str(tol)) * max(Decimal(1), abs(a.numeric_value), abs(b.numeric_value))
    return diff <= bound


@dataclass(slots=True)
class VoteResult:
    winner: Answer
    tally: dict[Answer, int] = field(default_factory=dict)
    valid_count: int = 0
    invalid_count: int = 0
    tie_broken: bool = False


def majority_vote(answers: Sequence[Answer], tol: float) -> VoteResult:
    """Cluster valid answers by equivalence (first answer seen becomes the
    cluster representative) and elect the largest cluster. Ties go to the
    cluster whose member appeared earliest, and are flagged.

    Accepts the answers in path order: form-major, then seed order within the
    form, which makes the tie-break deterministic.
    """
    if not answers:
        raise ValueError("majority_vote needs at least one path")
    clusters: list[list] = []  # [representative, count, first_index]
    invalid_count = 0
    first_invalid: Answer | None = None
    for idx, answer in enumerate(answers):
        if answer.kind is AnswerKind.INVALID:
            invalid_count += 1
            if first_invalid is None:
                first_invalid = answer
            continue
        for cluster in clusters:
            if answers_equivalent(cluster[0], answer, tol):
                cluster[1] += 1
                break
        else:
            clusters.append([answer, 1, idx])
    valid_count = len(answers) - invalid_count
    if not clusters:
        assert first_invalid is not None
        return VoteResult(winner=first_invalid, tally={}, valid_count=0, invalid_count=invalid_count)
    best = max(c[1] for c in clusters)
    contenders = [c for c in clusters if c[1] == best]
    winner_cluster = min(contenders, key=lambda c: c[2])
    return VoteResult(
        winner=winner_cluster[0],
        tally={c[0]: c[1] for c in clusters},
        valid_count=valid_count,
        invalid_count=invalid_count,
        tie_broken=len(contenders) > 1,
    )


def gold_as_answer(gold: GoldAnswer) -> Answer:
    if gold.kind is AnswerKind.NUMERIC:
        assert gold.numeric_value is not None
        return numeric_answer(gold.numeric_value)
    return Answer(AnswerKind.CHOICE, choice_label=gold.choice_label)


def answer_matches_gold(answer: Answer, gold: GoldAnswer, tol: float) -> bool:
    if answer.kind is AnswerKind.INVALID:
        return False
    if gold.kind is AnswerKind.NUMERIC:
        if answer.kind is not AnswerKind.NUMERIC:
            return False
        assert answer.numeric_value is not None and gold.numeric_value is not None
        diff = abs(answer.numeric_value - gold.numeric_value)
        bound = Decimal(str(tol)) * max(Decimal(1), abs(answer.numeric_value), abs(gold.numeric_value))
        return diff <= bound
    return answer.kind is AnswerKind.CHOICE and answer.choice_label == gold.choice_label


def score(vote: VoteResult, gold: GoldAnswer, tol: float) -> bool:
    """Did the vote's winner match the gold answer?"""
    return answer_matches_gold(vote.winner, gold, tol)
