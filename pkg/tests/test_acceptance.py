"""Acceptance gate: the externally checkable guarantees, one test per claim.

Each test carries its runtime budget; everything runs offline against the
scripted provider or pure arithmetic.
"""

from __future__ import annotations

import itertools
import json
import time
from contextlib import contextmanager
from decimal import Decimal
from pathlib import Path

import numpy as np
import pytest

from rmpot.bank import build_bank, classify_domain, retrieve_topk
from rmpot.cli import main
from rmpot.core import AnswerKind, PipelineConfig, Problem, ReformMode
from rmpot.evalharness import (
    Method,
    load_dataset,
    percent,
    render_ablation_table,
    render_main_table,
    solve_rate,
    solve_rate_diff,
)
from rmpot.execbox import InlineSandbox
from rmpot.gateway import EmbeddingVec, Gateway
from rmpot.pipeline import solve_problem
from rmpot.reformulate import NAIVE_PREFIX
from rmpot.scripted import ScriptedTransport
from rmpot.solver import SOLVER_INSTRUCTION, ReasoningPath
from rmpot.votebox import gold_as_answer, invalid_answer, majority_vote, numeric_answer
from rmpot.core import GoldAnswer, InvalidReason

DATA = Path(__file__).parent / "data"


@contextmanager
def budget(seconds: float):
    started = time.monotonic()
    yield
    elapsed = time.monotonic() - started
    assert elapsed < seconds, f"took {elapsed:.2f}s, budget {seconds}s"


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for name in ("RMPOT_API_KEY", "RMPOT_BASE_URL", "RMPOT_CACHE_DIR"):
        monkeypatch.delenv(name, raising=False)


def _path(value: int | None) -> ReasoningPath:
    answer = numeric_answer(Decimal(value)) if value is not None else invalid_answer(InvalidReason.EXEC_ERROR)
    return ReasoningPath(source_form=0, raw_completion="", code=None, exec=None, answer=answer)


# 1. Solve-rate arithmetic: the sixteenths render exactly. ------------------------

def test_solve_rate_sixteenths_render_exactly() -> None:
    with budget(1.0):
        gold = GoldAnswer(AnswerKind.NUMERIC, numeric_value=Decimal(7))
        before = [_path(7)] * 7 + [_path(1)] * 9
        after = [_path(7)] * 13 + [_path(1)] * 3
        assert solve_rate(before, gold, 1e-6) == 0.4375
        assert solve_rate(after, gold, 1e-6) == 0.8125
        assert percent(0.4375) == "43.8"
        assert percent(0.8125) == "81.3"
        assert solve_rate_diff(before, after, gold, 1e-6) == 0.375


# 2. Voting oracle: every multiset of size <= 5 over a 3-symbol alphabet. ----------

ONE = numeric_answer(Decimal(1))
TWO = numeric_answer(Decimal(2))
INV = invalid_answer(InvalidReason.EXEC_ERROR)


def _token(answer) -> str | None:
    return None if answer.kind is AnswerKind.INVALID else answer.display()


def _counter_vote(answers):
    """Independent reference: count display tokens, earliest-first tie-break."""
    counts: dict[str, int] = {}
    first: dict[str, int] = {}
    for idx, answer in enumerate(answers):
        token = _token(answer)
        if token is None:
            continue
        counts[token] = counts.get(token, 0) + 1
        first.setdefault(token, idx)
    invalid = sum(1 for a in answers if _token(a) is None)
    if not counts:
        return answers[0], {}, 0, invalid, False
    top = max(counts.values())
    contenders = [t for t, c in counts.items() if c == top]
    winner_token = min(contenders, key=lambda t: first[t])
    return winner_token, counts, len(answers) - invalid, invalid, len(contenders) > 1


def test_voting_matches_counter_on_all_small_multisets() -> None:
    with budget(5.0):
        cases = 0
        for size in range(6):
            for combo in itertools.product((ONE, TWO, INV), repeat=size):
                cases += 1
                if size == 0:
                    with pytest.raises(ValueError):
                        majority_vote([], 1e-6)
                    continue
                vote = majority_vote(list(combo), 1e-6)
                token, counts, valid, invalid, tied = _counter_vote(combo)
                assert vote.valid_count == valid
                assert vote.invalid_count == invalid
                assert vote.tie_broken == tied
                if isinstance(token, str):
                    assert vote.winner.display() == token
                    assert {a.display(): c for a, c in vote.tally.items()} == counts
                else:  # all invalid: first path's answer, empty tally
                    assert vote.winner == combo[0]
                    assert vote.tally == {}
        assert cases == 364


# 3. Path accounting across (K, N) grid under the scripted provider. ---------------

_SOLVE_PREFIX = SOLVER_INSTRUCTION.partition("{")[0]


def _classify(content: str) -> str | None:
    if content.startswith(NAIVE_PREFIX):
        return "reform"
    if content.startswith(_SOLVE_PREFIX):
        return "solve"
    return None


def test_path_accounting_for_all_k() -> None:
    with budget(10.0):
        for k in (1, 2, 4):
            gateway = Gateway(
                ScriptedTransport({"rules": [
                    {"match": NAIVE_PREFIX, "echo": True, "prefix": "r{i}: "},
                    {"match": "pebbles", "completions": ["```\nans = 9\n```"]},
                ]})
            )
            cfg = PipelineConfig().replace(k=k, n=16, reform_mode=ReformMode.NAIVE)
            problem = Problem(id="acc", text="a jar of pebbles")
            outcome = solve_problem(problem, cfg, gateway, InlineSandbox())
            assert len(outcome.paths) == 16
            per_form = {form: 0 for form in range(k)}
            for path in outcome.paths:
                per_form[path.source_form] += 1
            assert all(count == 16 // k for count in per_form.values())
            sampled = gateway.sampled_counts(_classify)
            assert sampled == {"reform": k, "solve": 16}


# 4 + 5. Retrieval and classification against full-scan numpy oracles. -------------

class _TableGateway:
    """Embeds by lookup in a fixed table; shaped like Gateway.embed."""

    def __init__(self, table: dict[str, np.ndarray]):
        self.table = table

    def embed(self, texts, model):
        return [EmbeddingVec(tuple(float(x) for x in self.table[t])) for t in texts]


def _random_bank(rng: np.random.Generator, n: int = 100, dim: int = 32):
    vectors = rng.normal(size=(n, dim))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    vectors[96] = vectors[92]  # duplicate pair in one domain: tie must break by id
    pairs = [
        {"id": f"q{i:03d}", "question": f"question {i:03d}", "solution": "ans = 0", "domain": f"d{i % 4}"}
        for i in range(n)
    ]
    table = {p["question"]: vectors[i] for i, p in enumerate(pairs)}
    return pairs, table, vectors


def _oracle_topk(pairs, vectors, query: np.ndarray, k: int = 5):
    domains = sorted({p["domain"] for p in pairs})
    best_domain, best_sim = None, -np.inf
    for name in domains:
        members = [i for i, p in enumerate(pairs) if p["domain"] == name]
        centroid = vectors[members].mean(axis=0)
        centroid /= np.linalg.norm(centroid)
        sim = float(centroid @ query)
        if sim > best_sim:
            best_domain, best_sim = name, sim
    candidates = [
        (-float(vectors[i] @ query), p["id"])
        for i, p in enumerate(pairs)
        if p["domain"] == best_domain
    ]
    candidates.sort()
    return best_domain, [entry_id for _, entry_id in candidates[:k]]


def test_retrieval_matches_full_scan_oracle() -> None:
    with budget(5.0):
        rng = np.random.default_rng(1234)
        for _ in range(20):
            pairs, table, vectors = _random_bank(rng)
            queries = []
            for qi in range(4):
                vec = rng.normal(size=32)
                vec /= np.linalg.norm(vec)
                text = f"fresh query {qi}"
                table[text] = vec
                queries.append((text, vec))
            queries.append(("duplicate-hitting query", vectors[92]))
            table["duplicate-hitting query"] = vectors[92]

            gateway = _TableGateway(table)
            bank = build_bank(pairs, gateway, model="m")
            for text, vec in queries:
                problem = Problem(id="q", text=text)
                got = [e.id for e in retrieve_topk(problem, bank, gateway, "m", k=5)]
                oracle_domain, oracle_ids = _oracle_topk(pairs, vectors, vec)
                assert got == oracle_ids
                assert classify_domain(problem, bank, gateway, "m").name == oracle_domain


def test_classification_and_centroids_permutation_invariant() -> None:
    with budget(5.0):
        rng = np.random.default_rng(99)
        pairs, table, vectors = _random_bank(rng)
        table["probe text"] = vectors[5]
        gateway = _TableGateway(table)
        bank = build_bank(pairs, gateway, model="m")

        shuffled = list(pairs)
        rng.shuffle(shuffled)
        bank2 = build_bank(shuffled, gateway, model="m")

        for d1, d2 in zip(bank.domains, bank2.domains):
            assert d1.name == d2.name
            assert max(abs(a - b) for a, b in zip(d1.centroid.values, d2.centroid.values)) <= 1e-12
        probe = Problem(id="p", text="probe text")
        assert classify_domain(probe, bank, gateway, "m").name == classify_domain(probe, bank2, gateway, "m").name
        ranked1 = [e.id for e in retrieve_topk(probe, bank, gateway, "m", k=5)]
        ranked2 = [e.id for e in retrieve_topk(probe, bank2, gateway, "m", k=5)]
        assert ranked1 == ranked2


# 6. End-to-end run over the 20-problem fixture. ------------------------------------

E2E_ARGS = [
    "eval",
    "--dataset", str(DATA / "e2e_problems.jsonl"),
    "--kind", "gsm8k",
    "--methods", "rmpot",
    "--mode", "naive", "--k", "2", "--n", "4",
    "--mock-script", str(DATA / "e2e_mock.json"),
]


def test_end_to_end_mock_run(tmp_path) -> None:
    with budget(30.0):
        out = tmp_path / "out"
        assert main([*E2E_ARGS, "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["accuracy"] == 0.8
        assert report["accuracy_pct"] == "80.0"
        assert report["n_correct"] == 16 and report["n_total"] == 20
        all_invalid = [rec for rec in report["problems"] if rec["valid"] == 0]
        assert len(all_invalid) == 1
        assert all_invalid[0]["winner"] == "INVALID(no_code)"


# 7. Replay determinism with a warm cache. -------------------------------------------

def test_replay_is_deterministic_and_offline(tmp_path, monkeypatch, capsys) -> None:
    with budget(30.0):
        monkeypatch.setenv("RMPOT_CACHE_DIR", str(tmp_path / "cache"))
        out1, out2 = tmp_path / "first", tmp_path / "second"
        assert main([*E2E_ARGS, "--out", str(out1)]) == 0
        capsys.readouterr()
        assert main([*E2E_ARGS, "--out", str(out2)]) == 0
        stderr = capsys.readouterr().err
        for name in ("report.json", "summary.csv", "problems.csv"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name
        assert "[stats] transport_calls=0" in stderr


# 8. Report fidelity: stored round-two-table numbers reproduce the layouts. ----------

def test_tables_reproduce_stored_numbers() -> None:
    with budget(1.0):
        datasets = ["GSM8K", "AQuA", "SVAMP"]
        main_values = {
            Method.COT: {"GSM8K": 0.756, "AQuA": 0.632, "SVAMP": 0.863},
            Method.SC: {"GSM8K": 0.773, "AQuA": 0.649, "SVAMP": 0.876},
            Method.POT: {"GSM8K": 0.789, "AQuA": 0.656, "SVAMP": 0.871},
            Method.RM_POT: {"GSM8K": 0.804, "AQuA": 0.691, "SVAMP": 0.880},
        }
        assert render_main_table(main_values, datasets) == (
            "Method,GSM8K,AQuA,SVAMP\n"
            "CoT,75.6,63.2,86.3\n"
            "SC,77.3,64.9,87.6\n"
            "PoT,78.9,65.6,87.1\n"
            "RM-PoT,80.4,69.1,88.0\n"
        )
        grid_values = {
            (ReformMode.NAIVE, 1): {"GSM8K": 0.782, "AQuA": 0.660, "SVAMP": 0.869},
            (ReformMode.NAIVE, 2): {"GSM8K": 0.798, "AQuA": 0.677, "SVAMP": 0.884},
            (ReformMode.NAIVE, 4): {"GSM8K": 0.804, "AQuA": 0.691, "SVAMP": 0.880},
            (ReformMode.IN_CONTEXT, 1): {"GSM8K": 0.784, "AQuA": 0.676, "SVAMP": 0.871},
            (ReformMode.IN_CONTEXT, 2): {"GSM8K": 0.801, "AQuA": 0.694, "SVAMP": 0.890},
            (ReformMode.IN_CONTEXT, 4): {"GSM8K": 0.809, "AQuA": 0.722, "SVAMP": 0.896},
        }
        assert render_ablation_table(grid_values, datasets) == (
            "Mode,K,GSM8K,AQuA,SVAMP\n"
            "Naive,1,78.2,66.0,86.9\n"
            "Naive,2,79.8,67.7,88.4\n"
            "Naive,4,80.4,69.1,88.0\n"
            "In-Context,1,78.4,67.6,87.1\n"
            "In-Context,2,80.1,69.4,89.0\n"
            "In-Context,4,80.9,72.2,89.6\n"
        )


# 9. Gold parsing over real published records. ----------------------------------------

GSM8K_GOLDS = [
    18, 3, 70000, 540, 20, 64, 260, 160, 10, 460, 366, 694,
    13, 18, 60, 125, 230, 57500, 7, 6, 5, 16, 41, 121,
]

AQUA_GOLDS = list("ECCDDDBACCBDCCBADCDEBADB")


def test_gold_parsing_against_published_records() -> None:
    gsm8k = load_dataset(DATA / "gsm8k_real.jsonl", "gsm8k")
    assert len(gsm8k) == 24
    for i, (problem, expected) in enumerate(zip(gsm8k, GSM8K_GOLDS)):
        assert problem.id == f"gsm8k-{i:05d}"
        assert problem.gold.kind is AnswerKind.NUMERIC
        assert problem.gold.numeric_value == Decimal(expected), problem.id

    aqua = load_dataset(DATA / "aqua_real.jsonl", "aqua")
    assert len(aqua) == 24
    for i, (problem, expected) in enumerate(zip(aqua, AQUA_GOLDS)):
        assert problem.id == f"aqua-{i:05d}"
        assert problem.gold.kind is AnswerKind.CHOICE
        assert problem.gold.choice_label == expected, problem.id
        assert len(problem.options) == 5

    # a voted answer equal to the parsed gold scores as a hit
    gold = gsm8k[0].gold
    assert gold_as_answer(gold) == numeric_answer(Decimal(18))
