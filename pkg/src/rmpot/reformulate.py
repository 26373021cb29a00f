"""Surface-form reformulation: ask the model to restate a problem with a
different sentence structure before any solving happens.

Two prompt styles exist. The naive style is a single fixed instruction; the
in-context style prepends worked rewrite pairs ordered by how much each
rewrite improved downstream solve rate (its margin).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Sequence

from .core import PipelineConfig, PreconditionError, Problem, ReformMode
from .gateway import Gateway, GatewayError, user_request

log = logging.getLogger(__name__)

NAIVE_PREFIX = (
    "Reformulate the following math problem, try to change the sentence structure of the problem: "
)

INCONTEXT_HEADER = (
    "Reformulate math problems by changing their sentence structure while "
    "preserving all quantities and the asked question. Follow the examples."
)

# Extra single-sample attempts granted per slot when a completion comes back
# empty, before falling back to the original text.
MAX_RETRIES_PER_SLOT = 3


class EmptyExemplars(PreconditionError):
    """In-context prompting was requested without any exemplars."""


@dataclass(frozen=True, slots=True)
class ExemplarPair:
    """A rewrite worth imitating: original text, its reformulation, and the
    solve-rate margin the rewrite achieved (reformulated minus original)."""

    original: str
    reformulated: str
    margin: float

    def __post_init__(self) -> None:
        if not -1.0 <= self.margin <= 1.0:
            raise ValueError(f"margin must lie in [-1, 1], got {self.margin}")


@dataclass(frozen=True, slots=True)
class Reformulation:
    """One generated surface form. ``degenerate`` marks a slot that fell back
    to the original text after repeated empty completions."""

    parent_id: str
    mode: ReformMode
    index: int
    text: str
    degenerate: bool = False

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("a surface form cannot be empty")
        if self.index < 0:
            raise ValueError("index must be >= 0")


def build_naive_prompt(p: Problem) -> str:
    """The fixed rewrite instruction with the question stem appended.

    Only the stem is included; options never enter the rewrite prompt."""
    return NAIVE_PREFIX + p.text


def build_incontext_prompt(p: Problem, exemplars: Sequence[ExemplarPair]) -> str:
    """Instruction header, exemplar blocks in the given order, then the tail
    for the new problem. Exemplars must arrive sorted by margin, descending."""
    if not exemplars:
        raise EmptyExemplars("in-context reformulation needs at least one exemplar")
    for a, b in zip(exemplars, exemplars[1:]):
        if a.margin < b.margin:
            raise PreconditionError("exemplars must be sorted by margin, descending")
    blocks = "".join(f"Original: {e.original}\nReformulated: {e.reformulated}\n" for e in exemplars)
    return f"{INCONTEXT_HEADER}\n\n{blocks}Original: {p.text}\nReformulated:"


def select_exemplars(candidates: Sequence[ExemplarPair], m: int) -> list[ExemplarPair]:
    """Top-m candidates by margin (descending); margin ties break
    lexicographically on the original text. Asking for more than exist logs a
    warning and returns everything."""
    if m < 0:
        raise PreconditionError("m must be >= 0")
    ranked = sorted(candidates, key=lambda e: (-e.margin, e.original))
    if m > len(ranked):
        log.warning("asked for %d exemplars but only %d are available", m, len(ranked))
        return ranked
    return ranked[:m]


def reformulate(
    p: Problem,
    cfg: PipelineConfig,
    gateway: Gateway,
    exemplars: Sequence[ExemplarPair] | None = None,
) -> list[Reformulation]:
    """Produce exactly cfg.k surface forms for the problem.

    All k slots are drawn as independent samples of one prompt. A slot whose
    completion is empty after trimming gets up to three fresh single-sample
    retries (distinct seed indices, so they are distinct cache entries); if
    they all come back empty the slot falls back to the original text and is
    flagged degenerate.
    """
    if cfg.reform_mode is ReformMode.NONE:
        raise PreconditionError("reformulate() requires a reformulation mode")
    if cfg.reform_mode is ReformMode.IN_CONTEXT:
        pool = list(exemplars or [])
        if not pool:
            raise EmptyExemplars("in-context reformulation needs at least one exemplar")
        chosen = select_exemplars(pool, min(cfg.incontext_exemplars, len(pool)))
        prompt = build_incontext_prompt(p, chosen)
    else:
        prompt = build_naive_prompt(p)

    def request(n: int, seed: int):
        return user_request(
            prompt,
            model=cfg.model,
            temperature=cfg.temperature,
            top_p=cfg.top_p,
            top_k=cfg.top_k,
            n_samples=n,
            seed_index=seed,
        )

    texts = [t.strip() for t in gateway.chat(request(cfg.k, 0))]
    forms: list[Reformulation] = []
    for slot, text in enumerate(texts):
        degenerate = False
        attempt = 0
        while not text and attempt < MAX_RETRIES_PER_SLOT:
            retry_seed = cfg.k + slot * MAX_RETRIES_PER_SLOT + attempt
            try:
                text = gateway.chat(request(1, retry_seed))[0].strip()
            except GatewayError as exc:
                log.warning("retry for slot %d failed: %s", slot, exc)
                break
            attempt += 1
        if not text:
            text = p.text
            degenerate = True
        forms.append(
            Reformulation(parent_id=p.id, mode=cfg.reform_mode, index=slot, text=text, degenerate=degenerate)
        )
    return forms


# ----------------------------- exemplar storage -----------------------------


def load_exemplars(path: str) -> list[ExemplarPair]:
    """Read exemplar pairs from a JSONL file of
    {"original", "reformulated", "margin"} records."""
    pairs: list[ExemplarPair] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                pairs.append(
                    ExemplarPair(
                        original=str(record["original"]),
                        reformulated=str(record["reformulated"]),
                        margin=float(record["margin"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad exemplar record: {exc}") from exc
    return pairs


def save_exemplars(pairs: Sequence[ExemplarPair], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(
                json.dumps(
                    {"original": pair.original, "reformulated": pair.reformulated, "margin": pair.margin},
                    ensure_ascii=False,
                )
                + "\n"
            )
