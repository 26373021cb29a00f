"""Execution shim: run one untrusted math program and reply over JSON.

Invoked as ``{interpreter} {path-to-this-file}``.  Reads a single JSON
request from stdin::

    {"code": "...", "result_var": "ans", "timeout_s": 10, "mem_limit_mb": 512}

and writes a single JSON reply to stdout::

    {"status": "ok", "value_repr": "13.6875", "value_is_numeric": true,
     "stdout": "", "error_message": ""}

Status is one of ok / syntax_error / runtime_error / missing_var.  Any
failure of the *user program* is reported in the payload with exit code
0; a nonzero exit means the shim itself could not complete the protocol
(bad request, internal bug) and the host should treat the run as a
sandbox failure.  Stderr is diagnostic only.

The program runs in this process with the dangerous bits disabled:
file access is confined to a scratch directory (remove/rename and
friends included), the socket and subprocess machinery is stubbed out,
and memory / CPU / file-size rlimits are applied where the platform
supports them.  Hard wall-clock enforcement is the host's job -- it
kills this process at the deadline.  This is desk-scale containment for
generated arithmetic, not a security boundary for hostile tenants.

This file is deliberately self-contained (standard library only, no
package-relative imports) so it can be shipped around as a single file
and pointed at by path.
"""

import builtins
import decimal
import fractions
import io
import json
import math
import os
import sys
import tempfile
from contextlib import redirect_stdout

STDOUT_CAP = 8192
TEXT_CAP = 2048
FSIZE_CAP_BYTES = 32 * 1024 * 1024

_REAL_CONTEXT = decimal.Context(prec=12)

# Originals snapshotted before any guard patching, for the shim's own
# scratch cleanup (the guarded versions would trip over fd-relative or
# post-chdir paths).
_REAL_UNLINK = os.unlink
_REAL_RMDIR = os.rmdir


def _fail(message):
    """Shim-internal failure: no protocol reply is possible."""
    print(f"shim: {message}", file=sys.stderr)
    raise SystemExit(2)


def _read_request():
    raw = sys.stdin.read()
    try:
        req = json.loads(raw)
    except ValueError as exc:
        _fail(f"request is not valid JSON: {exc}")
    if not isinstance(req, dict):
        _fail("request must be a JSON object")
    code = req.get("code")
    if not isinstance(code, str) or not code:
        _fail("request field 'code' must be a non-empty string")
    var = req.get("result_var")
    if not isinstance(var, str) or not var.isidentifier():
        _fail("request field 'result_var' must be a valid identifier")
    timeout_s = req.get("timeout_s", 10.0)
    if isinstance(timeout_s, bool) or not isinstance(timeout_s, (int, float)) or timeout_s <= 0:
        _fail("request field 'timeout_s' must be a positive number")
    mem_limit_mb = req.get("mem_limit_mb", 512)
    if isinstance(mem_limit_mb, bool) or not isinstance(mem_limit_mb, int) or mem_limit_mb <= 0:
        _fail("request field 'mem_limit_mb' must be a positive integer")
    return code, var, float(timeout_s), mem_limit_mb


def _apply_rlimits(timeout_s, mem_limit_mb):
    """Best-effort OS limits; missing support degrades to host-timeout only."""
    try:
        import resource
        import signal
    except ImportError:
        print(
            "shim: resource limits unavailable on this platform; "
            "relying on the host timeout only",
            file=sys.stderr,
        )
        return
    limits = (
        (resource.RLIMIT_AS, mem_limit_mb * 1024 * 1024),
        (resource.RLIMIT_CPU, max(1, int(timeout_s) + 1)),
        (resource.RLIMIT_FSIZE, FSIZE_CAP_BYTES),
    )
    for which, value in limits:
        try:
            resource.setrlimit(which, (value, value))
        except (ValueError, OSError) as exc:
            print(f"shim: could not set rlimit {which}: {exc}", file=sys.stderr)
    # An ignored SIGXFSZ turns an over-cap write into a catchable OSError
    # instead of a process kill.
    try:
        signal.signal(signal.SIGXFSZ, signal.SIG_IGN)
    except (AttributeError, ValueError, OSError):
        pass


class _BlockedModule:
    """Stand-in placed in sys.modules; any attribute use raises."""

    def __init__(self, name, why):
        self._blocked_name = name
        self._blocked_why = why

    def __getattr__(self, attr):
        raise RuntimeError(
            f"{self._blocked_name} is disabled in the sandbox ({self._blocked_why})"
        )


_BLOCKED_MODULES = {
    "socket": "no network access",
    "_socket": "no network access",
    "ssl": "no network access",
    "subprocess": "no process spawning",
    "multiprocessing": "no process spawning",
    "ctypes": "no native code loading",
}

_BLOCKED_OS_CALLS = (
    "system", "popen", "fork", "forkpty",
    "execv", "execve", "execvp", "execvpe",
    "execl", "execle", "execlp", "execlpe",
    "spawnl", "spawnle", "spawnlp", "spawnlpe",
    "spawnv", "spawnve", "spawnvp", "spawnvpe",
    "posix_spawn", "posix_spawnp",
    "kill", "killpg", "abort", "_exit",
)

# os functions whose first (or first two) arguments are paths that must
# stay inside the scratch directory.
_GUARDED_OS_ONE_PATH = (
    "open", "remove", "unlink", "rmdir", "mkdir", "makedirs",
    "removedirs", "truncate", "chmod", "utime",
)
_GUARDED_OS_TWO_PATH = ("rename", "replace", "link", "symlink")


def _install_guards(scratch):
    def ensure_inside(path):
        if isinstance(path, int):  # fd pass-through; fds come from guarded opens
            return path
        p = os.fspath(path)
        if isinstance(p, bytes):
            p = os.fsdecode(p)
        resolved = os.path.realpath(p if os.path.isabs(p) else os.path.join(os.getcwd(), p))
        if resolved != scratch and not resolved.startswith(scratch + os.sep):
            raise PermissionError(f"path outside the scratch directory is blocked: {p!r}")
        return path

    real_open = builtins.open

    def guarded_open(file, *args, **kwargs):
        ensure_inside(file)
        return real_open(file, *args, **kwargs)

    builtins.open = guarded_open
    io.open = guarded_open  # pathlib and friends route through io.open

    for name, why in _BLOCKED_MODULES.items():
        sys.modules[name] = _BlockedModule(name, why)

    def deny(name):
        def blocked(*_args, **_kwargs):
            raise RuntimeError(f"os.{name} is disabled in the sandbox")

        return blocked

    for name in _BLOCKED_OS_CALLS:
        if hasattr(os, name):
            setattr(os, name, deny(name))

    def guard_paths(name, n_paths):
        real = getattr(os, name)

        def guarded(*args, **kwargs):
            for arg in args[:n_paths]:
                ensure_inside(arg)
            return real(*args, **kwargs)

        return guarded

    for name in _GUARDED_OS_ONE_PATH:
        if hasattr(os, name):
            setattr(os, name, guard_paths(name, 1))
    for name in _GUARDED_OS_TWO_PATH:
        if hasattr(os, name):
            setattr(os, name, guard_paths(name, 2))

    # Point tempfile users at the scratch directory instead of /tmp.
    os.environ["TMPDIR"] = scratch
    tempfile.tempdir = scratch


def _real_text(value):
    """Decimal -> text with <=12 significant digits, trailing zeros stripped."""
    rounded = _REAL_CONTEXT.plus(value)
    if rounded == 0:
        return "0"
    return format(rounded.normalize(), "f")


def canonical_value_text(value):
    """Render a result value as (text, is_numeric) for the wire.

    Integers (and integer-valued floats, rationals, decimals) print
    exactly with no decimal point; other reals carry at most 12
    significant digits.  Non-finite floats and non-numbers travel as
    plain text flagged non-numeric.
    """
    if isinstance(value, bool):
        return str(int(value)), True
    if isinstance(value, int):
        return str(value), True
    if isinstance(value, float):
        if not math.isfinite(value):
            return repr(value), False
        if value.is_integer():
            return str(int(value)), True
        return _real_text(decimal.Decimal(repr(value))), True
    if isinstance(value, fractions.Fraction):
        if value.denominator == 1:
            return str(value.numerator), True
        quotient = _REAL_CONTEXT.divide(
            decimal.Decimal(value.numerator), decimal.Decimal(value.denominator)
        )
        return _real_text(quotient), True
    if isinstance(value, decimal.Decimal):
        if not value.is_finite():
            return str(value), False
        if value == value.to_integral_value():
            return str(int(value)), True
        return _real_text(value), True
    try:
        text = str(value)
    except Exception:
        return f"<unprintable {type(value).__name__}>", False
    return text[:TEXT_CAP], False


def _reply(status, value="", numeric=False, stdout="", error=""):
    return {
        "status": status,
        "value_repr": value,
        "value_is_numeric": numeric,
        "stdout": stdout[:STDOUT_CAP],
        "error_message": error[:TEXT_CAP],
    }


def _execute(code, result_var):
    try:
        compiled = compile(code, "<program>", "exec")
    except SyntaxError as exc:
        return _reply("syntax_error", error=f"SyntaxError: {exc}")
    namespace = {"__name__": "__main__", "__builtins__": builtins}
    captured = io.StringIO()
    try:
        with redirect_stdout(captured):
            exec(compiled, namespace)
    except BaseException as exc:  # any program failure becomes a reply
        return _reply(
            "runtime_error",
            stdout=captured.getvalue(),
            error=f"{type(exc).__name__}: {exc}",
        )
    if result_var not in namespace:
        return _reply(
            "missing_var",
            stdout=captured.getvalue(),
            error=f"variable {result_var!r} was never assigned",
        )
    text, numeric = canonical_value_text(namespace[result_var])
    return _reply("ok", value=text, numeric=numeric, stdout=captured.getvalue())


def _remove_scratch(scratch):
    for dirpath, dirnames, filenames in os.walk(scratch, topdown=False):
        for name in filenames:
            _REAL_UNLINK(os.path.join(dirpath, name))
        for name in dirnames:
            child = os.path.join(dirpath, name)
            try:
                _REAL_RMDIR(child)
            except OSError:
                _REAL_UNLINK(child)  # dangling symlink to a directory
    _REAL_RMDIR(scratch)


def main():
    code, result_var, timeout_s, mem_limit_mb = _read_request()

    # Reserve the protocol channel: the reply goes to a duplicate of the
    # original stdout while fd 1 points at /dev/null, so not even direct
    # os.write(1, ...) from the program can corrupt the JSON stream.
    reply_fd = os.dup(1)
    devnull = os.open(os.devnull, os.O_WRONLY)
    os.dup2(devnull, 1)
    os.close(devnull)

    scratch = os.path.realpath(tempfile.mkdtemp(prefix="shim-scratch-"))
    os.chdir(scratch)
    _apply_rlimits(timeout_s, mem_limit_mb)
    _install_guards(scratch)

    payload = _execute(code, result_var)

    try:
        os.chdir(os.path.dirname(scratch))
        _remove_scratch(scratch)
    except OSError as exc:
        print(f"shim: scratch cleanup failed: {exc}", file=sys.stderr)

    os.write(reply_fd, (json.dumps(payload) + "\n").encode("utf-8"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
