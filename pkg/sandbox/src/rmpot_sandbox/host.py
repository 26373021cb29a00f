"""Host-side client for the execution shim.

``run_code`` launches one shim process per call, feeds it the JSON
request, and classifies everything the shim cannot see from inside:
a process that outlives its deadline is killed and reported as
``timeout``; a crash, nonzero exit, or malformed reply is reported as
``sandbox_failure``.  Replies from a healthy shim pass through with
their wire status (ok / syntax_error / runtime_error / missing_var).

The returned dict always carries exactly the five reply fields, so
callers can treat every outcome uniformly.
"""

import json
import subprocess
import sys
from pathlib import Path

DEFAULT_SHIM = Path(__file__).resolve().with_name("shim.py")

_WIRE_STATUSES = frozenset({"ok", "syntax_error", "runtime_error", "missing_var"})
_STDERR_SNIPPET = 500


def _classified(status, error_message):
    return {
        "status": status,
        "value_repr": "",
        "value_is_numeric": False,
        "stdout": "",
        "error_message": error_message,
    }


def run_code(
    code,
    *,
    result_var="ans",
    timeout_s=10.0,
    mem_limit_mb=512,
    interpreter=None,
    shim_path=None,
):
    """Execute ``code`` in a fresh shim process and return its reply dict."""
    if not isinstance(code, str) or not code:
        raise ValueError("code must be a non-empty string")
    if not isinstance(result_var, str) or not result_var.isidentifier():
        raise ValueError(f"result_var must be a valid identifier, got {result_var!r}")
    if timeout_s <= 0:
        raise ValueError("timeout_s must be positive")
    if mem_limit_mb <= 0:
        raise ValueError("mem_limit_mb must be positive")

    shim = Path(shim_path) if shim_path is not None else DEFAULT_SHIM
    request = json.dumps(
        {
            "code": code,
            "result_var": result_var,
            "timeout_s": timeout_s,
            "mem_limit_mb": mem_limit_mb,
        }
    )
    try:
        proc = subprocess.Popen(
            [interpreter or sys.executable, str(shim)],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
        )
    except OSError as exc:
        return _classified("sandbox_failure", f"could not launch shim: {exc}")

    try:
        out, err = proc.communicate(request, timeout=timeout_s)
    except subprocess.TimeoutExpired:
        proc.kill()
        proc.communicate()
        return _classified("timeout", f"killed after {timeout_s}s")

    if proc.returncode != 0:
        detail = err.strip()[:_STDERR_SNIPPET]
        message = f"shim exited with status {proc.returncode}"
        if detail:
            message = f"{message}: {detail}"
        return _classified("sandbox_failure", message)

    try:
        reply = json.loads(out)
        status = reply["status"]
        value_repr = reply["value_repr"]
        value_is_numeric = reply["value_is_numeric"]
        stdout = reply["stdout"]
        error_message = reply["error_message"]
    except (ValueError, KeyError, TypeError):
        return _classified("sandbox_failure", "malformed shim reply")
    if (
        status not in _WIRE_STATUSES
        or not isinstance(value_repr, str)
        or not isinstance(value_is_numeric, bool)
        or not isinstance(stdout, str)
        or not isinstance(error_message, str)
    ):
        return _classified("sandbox_failure", f"malformed shim reply (status {status!r})")

    return {
        "status": status,
        "value_repr": value_repr,
        "value_is_numeric": value_is_numeric,
        "stdout": stdout,
        "error_message": error_message,
    }
