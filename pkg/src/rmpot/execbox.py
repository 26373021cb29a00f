"""Execution backends for generated programs.

The solver hands each generated program to a runner and gets back an
``ExecOutcome``. Two runners ship here:

* ``InlineSandbox`` evaluates code in-process. It honors the same reply
  contract as the external shim but provides no real isolation and cannot
  interrupt runaway code, so it is meant for scripted/offline runs and tests
  where the programs come from trusted fixtures.
* ``ShimSandbox`` spawns an external shim process (one fresh process per run)
  and speaks the JSON-line protocol: a single request object on stdin, a
  single reply object on stdout. The wall-clock timeout is enforced here by
  killing the child.

Numeric results travel as canonical decimal text: integers exactly, reals
capped at 12 significant digits with trailing zeros stripped.
"""

from __future__ import annotations

import enum
import io
import json
import subprocess
import sys
import time
from contextlib import redirect_stderr, redirect_stdout
from dataclasses import dataclass
from decimal import Context, Decimal
from fractions import Fraction
from typing import Protocol

STDOUT_CAP = 8192  # bytes of captured program stdout kept in an outcome
_ERR_CAP = 2048

_REAL_CONTEXT = Context(prec=12)


class ExecStatus(enum.Enum):
    OK = "ok"
    SYNTAX_ERROR = "syntax_error"
    RUNTIME_ERROR = "runtime_error"
    TIMEOUT = "timeout"
    MISSING_VAR = "missing_var"
    SANDBOX_FAILURE = "sandbox_failure"


@dataclass(frozen=True, slots=True)
class ExecOutcome:
    status: ExecStatus
    value: str | None = None
    value_is_numeric: bool = False
    stdout: str = ""
    duration_s: float = 0.0
    error_message: str = ""


class SandboxRunner(Protocol):
    def run(self, code: str, result_var: str, timeout_s: float, mem_limit_mb: int) -> ExecOutcome:
        ...


def canonical_value_text(value: object) -> tuple[str, bool]:
    """Render a program result as (text, is_numeric) canonical decimal text.

    Integers keep all digits and never grow a decimal point; reals are rounded
    to at most 12 significant digits and lose trailing zeros, which also
    absorbs binary-float noise (21.90/1.60 renders as 13.6875).
    """
    if isinstance(value, bool):
        return str(int(value)), True
    if isinstance(value, int):
        return str(value), True
    if isinstance(value, float):
        if value != value or value in (float("inf"), float("-inf")):
            return repr(value), False
        if value.is_integer():
            return str(int(value)), True
        return _real_text(Decimal(repr(value))), True
    if isinstance(value, Fraction):
        if value.denominator == 1:
            return str(value.numerator), True
        return _real_text(_REAL_CONTEXT.divide(Decimal(value.numerator), Decimal(value.denominator))), True
    if isinstance(value, Decimal):
        if not value.is_finite():
            return str(value), False
        if value == value.to_integral_value():
            return str(int(value)), True
        return _real_text(value), True
    text = str(value)
    if len(text) > _ERR_CAP:
        text = text[:_ERR_CAP]
    return text, False


def _real_text(d: Decimal) -> str:
    rounded = _REAL_CONTEXT.plus(d)
    if rounded == 0:
        return "0"
    return format(rounded.normalize(), "f")


class InlineSandbox:
    """In-process evaluator honoring the shim's reply contract.

    No timeout enforcement and no process isolation; file writes are blocked
    crudely by withholding ``open``. Use only with trusted or scripted code.
    """

    def run(self, code: str, result_var: str, timeout_s: float = 10.0, mem_limit_mb: int = 512) -> ExecOutcome:
        started = time.monotonic()
        try:
            compiled = compile(code, "<generated>", "exec")
        except SyntaxError as exc:
            return ExecOutcome(
                ExecStatus.SYNTAX_ERROR,
                duration_s=time.monotonic() - started,
                error_message=_errtext(exc),
            )
        namespace: dict[str, object] = {"__name__": "__main__", "__builtins__": _guarded_builtins()}
        out = io.StringIO()
        err = io.StringIO()
        try:
            with redirect_stdout(out), redirect_stderr(err):
                exec(compiled, namespace)  # noqa: S102 - this runner is for trusted fixture code
        except BaseException as exc:  # anything the program raises is its own failure
            return ExecOutcome(
                ExecStatus.RUNTIME_ERROR,
                stdout=out.getvalue()[:STDOUT_CAP],
                duration_s=time.monotonic() - started,
                error_message=_errtext(exc),
            )
        duration = time.monotonic() - started
        if result_var not in namespace:
            return ExecOutcome(
                ExecStatus.MISSING_VAR,
                stdout=out.getvalue()[:STDOUT_CAP],
                duration_s=duration,
                error_message=f"variable {result_var!r} not defined",
            )
        text, numeric = canonical_value_text(namespace[result_var])
        return ExecOutcome(
            ExecStatus.OK,
            value=text,
            value_is_numeric=numeric,
            stdout=out.getvalue()[:STDOUT_CAP],
            duration_s=duration,
        )


def _guarded_builtins() -> dict[str, object]:
    import builtins

    allowed = dict(vars(builtins))

    def _blocked_open(*_args: object, **_kwargs: object) -> None:
        raise RuntimeError("file access is not available in this runner")

    allowed["open"] = _blocked_open
    return allowed


def _errtext(exc: BaseException) -> str:
    text = f"{type(exc).__name__}: {exc}"
    return text[:_ERR_CAP]


_STATUS_BY_WIRE = {
    "ok": ExecStatus.OK,
    "syntax_error": ExecStatus.SYNTAX_ERROR,
    "runtime_error": ExecStatus.RUNTIME_ERROR,
    "missing_var": ExecStatus.MISSING_VAR,
}


class ShimSandbox:
    """Client for an external execution shim speaking the JSON stdin/stdout
    protocol. Each run is one fresh ``{interpreter} {shim_path}`` process."""

    def __init__(self, shim_path: str, interpreter: str | None = None):
        self.shim_path = shim_path
        self.interpreter = interpreter or sys.executable

    def run(self, code: str, result_var: str, timeout_s: float = 10.0, mem_limit_mb: int = 512) -> ExecOutcome:
        request = json.dumps(
            {"code": code, "result_var": result_var, "timeout_s": timeout_s, "mem_limit_mb": mem_limit_mb}
        )
        started = time.monotonic()
        try:
            proc = subprocess.Popen(
                [self.interpreter, self.shim_path],
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
            )
        except OSError as exc:
            return ExecOutcome(ExecStatus.SANDBOX_FAILURE, error_message=_errtext(exc))
        try:
            out, _err = proc.communicate(request, timeout=timeout_s)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.communicate()
            return ExecOutcome(
                ExecStatus.TIMEOUT,
                duration_s=time.monotonic() - started,
                error_message=f"killed after {timeout_s}s",
            )
        duration = time.monotonic() - started
        if proc.returncode != 0:
            return ExecOutcome(
                ExecStatus.SANDBOX_FAILURE,
                duration_s=duration,
                error_message=f"shim exited with status {proc.returncode}",
            )
        try:
            reply = json.loads(out)
            status = _STATUS_BY_WIRE[reply["status"]]
            value = reply.get("value_repr") or None
            return ExecOutcome(
                status,
                value=value if status is ExecStatus.OK else None,
                value_is_numeric=bool(reply.get("value_is_numeric")) if status is ExecStatus.OK else False,
                stdout=str(reply.get("stdout", ""))[:STDOUT_CAP],
                duration_s=duration,
                error_message=str(reply.get("error_message", ""))[:_ERR_CAP],
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            return ExecOutcome(
                ExecStatus.SANDBOX_FAILURE,
                duration_s=duration,
                error_message=f"malformed shim reply: {_errtext(exc)}",
            )
