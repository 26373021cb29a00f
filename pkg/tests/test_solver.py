"""Solver: prompt building, code extraction, choice resolution, path assembly."""

from __future__ import annotations

import re
from decimal import Decimal
from types import SimpleNamespace

import pytest
from hypothesis import given, strategies as st

from rmpot.core import AnswerKind, InvalidReason, PipelineConfig, PreconditionError, ReformMode
from rmpot.execbox import ExecStatus, InlineSandbox
from rmpot.gateway import Gateway
from rmpot.scripted import ScriptedTransport
from rmpot.solver import (
    SOLVER_INSTRUCTION,
    build_solver_prompt,
    extract_code,
    resolve_choice,
    solve_paths,
)
from rmpot.votebox import numeric_answer


def make_cfg(**kw) -> PipelineConfig:
    return PipelineConfig().replace(**kw)


def make_gateway(script: dict) -> Gateway:
    return Gateway(transport=ScriptedTransport(script), cache=None)


def entry(q: str, code: str) -> SimpleNamespace:
    return SimpleNamespace(question=q, solution=code)


# --- prompt ------------------------------------------------------------------

def test_instruction_names_result_var() -> None:
    assert SOLVER_INSTRUCTION == (
        "Write a program that solves the problem; store the final numeric answer "
        "in a variable named {result_var}; output only code in one fenced block."
    )


def test_prompt_empty_fewshot() -> None:
    prompt = build_solver_prompt("What is 2+2?", [], "ans")
    assert prompt.startswith(
        "Write a program that solves the problem; store the final numeric answer "
        "in a variable named ans; output only code in one fenced block."
    )
    assert prompt.endswith("Question: What is 2+2?")
    assert prompt.count("Solution:") == 0


def test_prompt_renders_fewshot_in_order() -> None:
    shots = [entry(f"q{i}", f"ans = {i}") for i in range(5)]
    prompt = build_solver_prompt("target?", shots, "ans")
    assert prompt.count("Question: ") == 6
    assert prompt.count("Solution:\n```") == 5
    positions = [prompt.index(f"Question: q{i}") for i in range(5)]
    assert positions == sorted(positions)
    assert prompt.index("Question: q4") < prompt.index("Question: target?")
    assert prompt.endswith("Question: target?")
    # each solution body is fenced
    assert "Solution:\n```\nans = 3\n```" in prompt


def test_prompt_pure() -> None:
    shots = [entry("q", "ans = 1")]
    assert build_solver_prompt("t", shots, "ans") == build_solver_prompt("t", shots, "ans")


def test_prompt_rejects_bad_result_var() -> None:
    with pytest.raises(PreconditionError):
        build_solver_prompt("t", [], "not a name")
    with pytest.raises(PreconditionError):
        build_solver_prompt("t", [], "2x")


# --- code extraction: 50-case frozen corpus vs independent scanner ----------

def reference_extract(completion: str) -> str | None:
    """Independent line-walking scanner (the shipped one is regex-based)."""
    lines = completion.split("\n")
    open_idx = None
    for i, line in enumerate(lines):
        if line.lstrip().startswith("```"):
            open_idx = i
            break
    if open_idx is not None and open_idx < len(lines) - 1:
        # a structural fence: the opener line is newline-terminated
        body: list[str] = []
        for line in lines[open_idx + 1:]:
            if line.strip() == "```":
                break
            body.append(line)
        code = "\n".join(body).rstrip("\n")
        return code if code.strip() else None
    # either no fence at all, or a dangling ``` with nothing after it
    first = next((line for line in lines if line.strip()), None)
    if first is None:
        return None
    return completion if _ref_looks_like_code(first) else None


def _ref_looks_like_code(line: str) -> bool:
    s = line.lstrip()
    if s.startswith(("import ", "from ", "def ")):
        return True
    head, eq, tail = s.partition("=")
    if not eq or tail.startswith("="):
        return False
    parts = [p.strip() for p in head.split(",")]
    if any(not p for p in parts):
        return False
    token = re.compile(r"[A-Za-z_][\w.\[\]'\"]*\Z")
    return all(token.fullmatch(p) for p in parts)


WHOLE = object()  # sentinel: expected result is the untouched completion

CORPUS: list[tuple[str, object]] = [
    # fenced blocks (20)
    ("```\nans = 2\n```", "ans = 2"),
    ("```python\nans=1\n```", "ans=1"),
    ("text\n```python\nans=1\n```\n```\nans=2\n```", "ans=1"),
    ("Here you go:\n```\nx = 5\nans = x * 2\n```\nHope it helps.", "x = 5\nans = x * 2"),
    ("```py\nimport math\nans = math.sqrt(9)\n```", "import math\nans = math.sqrt(9)"),
    ("```\nans = 7", "ans = 7"),
    ("```python\nfor i in range(3):\n    ans = i", "for i in range(3):\n    ans = i"),
    ("```\n\n```", None),
    ("```\n```", None),
    ("```\n   \n\t\n```", None),
    ("  ```\nx=1\n```", "x=1"),
    ("```\nx=1\n   ```  ", "x=1"),
    ("```text\nThe answer is 4\n```", "The answer is 4"),
    ("```\nans = 2\n```\nextra\n```\nans = 3\n```", "ans = 2"),
    ("```Python3\nans = 10 // 3\n```", "ans = 10 // 3"),
    ("prose\nmore prose\n```\na, b = 3, 4\nans = a + b\n```", "a, b = 3, 4\nans = a + b"),
    ("```\n# comment only\n```", "# comment only"),
    ("```\nx = 1\n```python\ny = 2\n```", "x = 1\n```python\ny = 2"),
    ("````\nx=1\n````", "x=1\n````"),
    (
        "Sure thing!\n\n```python\ncost = 21.90\nshare = 1.60\nans = cost / share\n```\n\nDone.",
        "cost = 21.90\nshare = 1.60\nans = cost / share",
    ),
    # bare code recognized by the heuristic (15)
    ("ans = 7", WHOLE),
    ("x=1\ny=2\nans=x+y", WHOLE),
    ("import math\nans = math.pi", WHOLE),
    ("from math import sqrt\nans = sqrt(4)", WHOLE),
    ("def f():\n    return 3\nans = f()", WHOLE),
    ("\n\n  ans = 7", WHOLE),
    ("result = []\nfor i in range(3):\n    result.append(i)\nans = sum(result)", WHOLE),
    ("d['k'] = 1\nans = d['k']", WHOLE),
    ("a, b = 3, 4\nans = a*b", WHOLE),
    ("x[0] = 9\nans = x[0]", WHOLE),
    ("total=0\nfor p in [1,2]:\n    total+=p\nans=total", WHOLE),
    ("ans=21.90/1.60", WHOLE),
    ("ans = 'B'", WHOLE),
    ("def solve():\n    return 42\nans = solve()", WHOLE),
    ("importance = high_value\nans = 3", WHOLE),
    # neither fence nor code (15)
    ("I cannot solve this.", None),
    ("The answer is 7", None),
    ("2 + 2 = 4", None),
    ("", None),
    ("   \n\n", None),
    ("Answer: B", None),
    ("x == 7", None),
    ("ans += 1", None),
    ("Let x = 5, then ans is 10.", None),
    ("Sure, here's the approach: compute cost minus savings.", None),
    ("# just a comment\n# nothing else", None),
    ("print(7)", None),
    ("for i in range(3): pass", None),
    ("To solve: let ans=5", None),
    ("Q: what = ?", None),
]


def test_corpus_has_fifty_cases() -> None:
    assert len(CORPUS) == 50


@pytest.mark.parametrize("completion, expected", CORPUS, ids=range(len(CORPUS)))
def test_extract_code_against_frozen_and_reference(completion: str, expected) -> None:
    want = completion if expected is WHOLE else expected
    assert extract_code(completion) == want
    assert reference_extract(completion) == want


def test_extract_roundtrips_through_fence() -> None:
    for completion, expected in CORPUS:
        code = extract_code(completion)
        if code is not None and "```" not in code:
            assert extract_code(f"```\n{code}\n```") == code


@given(st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=200))
def test_extract_never_raises_and_agrees_with_reference(completion: str) -> None:
    if "\r" in completion:
        completion = completion.replace("\r", "")
    assert extract_code(completion) == reference_extract(completion)


# --- choice resolution -------------------------------------------------------

AQUA_OPTS = (("A", "20.66"), ("B", "21.16"), ("C", "20.13"), ("D", "21.41"), ("E", "21.50"))


def test_numeric_options_resolved_locally() -> None:
    gw = make_gateway({})  # any chat would raise: no rules
    cfg = make_cfg()
    out = resolve_choice(numeric_answer(Decimal("20.66")), AQUA_OPTS, gw, cfg)
    assert out.kind is AnswerKind.CHOICE and out.choice_label == "A"
    assert gw.transport_calls == 0


def test_numeric_options_nearest_not_exact() -> None:
    gw = make_gateway({})
    out = resolve_choice(numeric_answer(Decimal("21.3")), AQUA_OPTS, gw, make_cfg())
    assert out.choice_label == "D"  # |21.41-21.3|=0.11 beats |21.16-21.3|=0.14


def test_tie_goes_to_smaller_label() -> None:
    gw = make_gateway({})
    opts = (("A", "5"), ("B", "5"))
    out = resolve_choice(numeric_answer(Decimal(5)), opts, gw, make_cfg())
    assert out.choice_label == "A"
    out2 = resolve_choice(numeric_answer(Decimal(4)), (("A", "3"), ("B", "5")), gw, make_cfg())
    assert out2.choice_label == "A"  # equidistant: smaller label


def test_textual_options_go_through_llm() -> None:
    gw = make_gateway({"rules": [{"match": "Options:", "completions": ["B"]}]})
    opts = (("A", "a third"), ("B", "a half"), ("C", "a quarter"))
    out = resolve_choice(numeric_answer(Decimal("0.5")), opts, gw, make_cfg())
    assert out.kind is AnswerKind.CHOICE and out.choice_label == "B"
    assert gw.transport_calls == 1


def test_llm_reply_variants_parse() -> None:
    opts = (("A", "x"), ("B", "y"))
    for reply, want in [("(B)", "B"), ("B.", "B"), ("The correct option is B", "B"), ("b", "B")]:
        gw = make_gateway({"rules": [{"match": "Options:", "completions": [reply]}]})
        out = resolve_choice(numeric_answer(Decimal(1)), opts, gw, make_cfg())
        assert out.choice_label == want, reply


def test_unparseable_llm_reply_is_invalid() -> None:
    gw = make_gateway({"rules": [{"match": "Options:", "completions": ["no idea"]}]})
    opts = (("A", "x"), ("B", "y"))
    out = resolve_choice(numeric_answer(Decimal(1)), opts, gw, make_cfg())
    assert out.kind is AnswerKind.INVALID
    assert out.invalid_reason is InvalidReason.NON_NUMERIC


def test_choice_via_llm_forces_llm_even_for_numeric_options() -> None:
    gw = make_gateway({"rules": [{"match": "Options:", "completions": ["C"]}]})
    out = resolve_choice(numeric_answer(Decimal("20.66")), AQUA_OPTS, gw, make_cfg(choice_via_llm=True))
    assert out.choice_label == "C"
    assert gw.transport_calls == 1


def test_non_numeric_answers_pass_through() -> None:
    gw = make_gateway({})
    from rmpot.core import Answer

    choice = Answer(AnswerKind.CHOICE, choice_label="D")
    assert resolve_choice(choice, AQUA_OPTS, gw, make_cfg()) is choice
    from rmpot.votebox import invalid_answer

    inv = invalid_answer(InvalidReason.TIMEOUT)
    assert resolve_choice(inv, AQUA_OPTS, gw, make_cfg()) is inv
    num = numeric_answer(Decimal(3))
    assert resolve_choice(num, (), gw, make_cfg()) is num  # no options


# --- solve_paths -------------------------------------------------------------

GOOD = "```\nans = 7\n```"


def test_single_path() -> None:
    cfg = make_cfg(k=1, n=1, reform_mode=ReformMode.NONE)
    gw = make_gateway({"default": [GOOD]})
    paths = solve_paths(["What is 7?"], cfg, [], gw, InlineSandbox())
    assert len(paths) == 1
    p = paths[0]
    assert p.source_form == 0
    assert p.code == "ans = 7"
    assert p.exec is not None and p.exec.status is ExecStatus.OK
    assert p.answer == numeric_answer(Decimal(7))


def test_form_count_must_match_k() -> None:
    cfg = make_cfg(k=2, n=4)
    gw = make_gateway({"default": [GOOD]})
    with pytest.raises(PreconditionError):
        solve_paths(["only one form"], cfg, [], gw, InlineSandbox())


def test_path_and_seed_accounting() -> None:
    cfg = make_cfg(k=4, n=16)
    gw = make_gateway({"default": [GOOD]})
    forms = [f"form number {i}" for i in range(4)]
    paths = solve_paths(forms, cfg, [], gw, InlineSandbox())
    assert len(paths) == 16
    for i in range(4):
        assert sum(1 for p in paths if p.source_form == i) == 4
    assert all(p.answer == numeric_answer(Decimal(7)) for p in paths)
    # form i drew seeds i*4 .. i*4+3, in order
    seeds = [(req.seed_index, req.n_samples) for req in gw.chat_log]
    assert seeds == [(0, 4), (4, 4), (8, 4), (12, 4)]


def test_non_code_form_yields_no_code_paths() -> None:
    cfg = make_cfg(k=2, n=4)
    script = {
        "rules": [
            {"match": "form-a", "completions": [GOOD]},
            {"match": "form-b", "completions": ["I cannot solve this."]},
        ]
    }
    gw = make_gateway(script)
    paths = solve_paths(["form-a", "form-b"], cfg, [], gw, InlineSandbox())
    assert len(paths) == 4
    a_paths = [p for p in paths if p.source_form == 0]
    b_paths = [p for p in paths if p.source_form == 1]
    assert all(p.answer == numeric_answer(Decimal(7)) for p in a_paths)
    assert all(
        p.answer.kind is AnswerKind.INVALID and p.answer.invalid_reason is InvalidReason.NO_CODE
        for p in b_paths
    )
    assert all(p.code is None and p.exec is None for p in b_paths)
    assert all(p.raw_completion == "I cannot solve this." for p in b_paths)


def test_gateway_failure_fills_form_with_exec_error_paths() -> None:
    cfg = make_cfg(k=2, n=4)
    # no rule matches form-b and there is no default -> ProviderError for that call
    gw = make_gateway({"rules": [{"match": "form-a", "completions": [GOOD]}]})
    paths = solve_paths(["form-a", "form-b"], cfg, [], gw, InlineSandbox())
    assert len(paths) == 4  # count conserved under total form failure
    good = [p for p in paths if p.source_form == 0]
    bad = [p for p in paths if p.source_form == 1]
    assert len(good) == 2 and len(bad) == 2
    assert all(p.answer == numeric_answer(Decimal(7)) for p in good)
    for p in bad:
        assert p.answer.kind is AnswerKind.INVALID
        assert p.answer.invalid_reason is InvalidReason.EXEC_ERROR
        assert p.raw_completion == ""
        assert p.code is None and p.exec is None


def test_runtime_failures_become_exec_error_answers() -> None:
    cfg = make_cfg(k=1, n=2, reform_mode=ReformMode.NONE)
    gw = make_gateway({"default": ["```\nans = 1/0\n```"]})
    paths = solve_paths(["boom"], cfg, [], gw, InlineSandbox())
    assert len(paths) == 2
    for p in paths:
        assert p.exec is not None and p.exec.status is ExecStatus.RUNTIME_ERROR
        assert p.answer.invalid_reason is InvalidReason.EXEC_ERROR


def test_options_trigger_choice_resolution() -> None:
    cfg = make_cfg(k=1, n=1, reform_mode=ReformMode.NONE)
    gw = make_gateway({"default": ["```\nans = 20.66\n```"]})
    paths = solve_paths(["pick one"], cfg, [], gw, InlineSandbox(), options=AQUA_OPTS)
    assert paths[0].answer.kind is AnswerKind.CHOICE
    assert paths[0].answer.choice_label == "A"


def test_fewshot_flows_into_prompt() -> None:
    cfg = make_cfg(k=1, n=1, reform_mode=ReformMode.NONE)
    gw = make_gateway({"rules": [{"match": "ans = 99", "completions": [GOOD]}]})
    shots = [entry("warmup", "ans = 99")]
    paths = solve_paths(["the real question"], cfg, shots, gw, InlineSandbox())
    assert paths[0].answer == numeric_answer(Decimal(7))
    prompt = gw.chat_log[0].last_user_content()
    assert "Question: warmup" in prompt and prompt.endswith("Question: the real question")


@given(st.sampled_from([(1, 4), (2, 4), (4, 16), (2, 16), (1, 1)]))
def test_path_count_conservation(kn) -> None:
    k, n = kn
    cfg = make_cfg(k=k, n=n, reform_mode=ReformMode.NONE if k == 1 else ReformMode.NAIVE)
    gw = make_gateway({"default": [GOOD, "garbage", "```\nans = 1/0\n```"]})
    paths = solve_paths([f"f{i}" for i in range(k)], cfg, [], gw, InlineSandbox())
    assert len(paths) == n
    for i in range(k):
        assert sum(1 for p in paths if p.source_form == i) == n // k
