"""End-to-end solving of one problem: reformulate, retrieve, solve, vote."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .bank import Bank, BankEntry, retrieve_topk
from .core import PipelineConfig, Problem, ReformMode, validate_config
from .execbox import SandboxRunner
from .gateway import Gateway
from .reformulate import ExemplarPair, Reformulation, reformulate
from .solver import ReasoningPath, solve_paths
from .votebox import VoteResult, majority_vote


@dataclass(slots=True)
class SolveOutcome:
    """Everything one problem produced on its way to a voted answer."""

    problem: Problem
    forms: list[str]
    reformulations: list[Reformulation] = field(default_factory=list)
    fewshot: list[BankEntry] = field(default_factory=list)
    paths: list[ReasoningPath] = field(default_factory=list)
    vote: VoteResult | None = None


def surface_forms(
    p: Problem,
    cfg: PipelineConfig,
    gateway: Gateway,
    exemplars: Sequence[ExemplarPair] | None = None,
) -> tuple[list[str], list[Reformulation]]:
    """The K statements the solver will see: the problem itself when rewriting
    is off, otherwise K fresh reformulations."""
    if cfg.reform_mode is ReformMode.NONE:
        return [p.text], []
    reforms = reformulate(p, cfg, gateway, exemplars)
    return [r.text for r in reforms], reforms


def solve_problem(
    p: Problem,
    cfg: PipelineConfig,
    gateway: Gateway,
    sandbox: SandboxRunner,
    bank: Bank | None = None,
    exemplars: Sequence[ExemplarPair] | None = None,
) -> SolveOutcome:
    validate_config(cfg)
    forms, reforms = surface_forms(p, cfg, gateway, exemplars)
    fewshot = (
        retrieve_topk(p, bank, gateway, cfg.embed_model, k=cfg.fewshot_k) if bank is not None else []
    )
    paths = solve_paths(forms, cfg, fewshot, gateway, sandbox, options=p.options)
    vote = majority_vote([path.answer for path in paths], cfg.numeric_tol)
    return SolveOutcome(
        problem=p,
        forms=forms,
        reformulations=reforms,
        fewshot=fewshot,
        paths=paths,
        vote=vote,
    )
