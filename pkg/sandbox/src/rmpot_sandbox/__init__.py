"""Subprocess sandbox for running model-generated math programs.

One process per program: the host writes a JSON request on the shim's
stdin, the shim executes the code with file/network/process guards and
resource limits, and writes exactly one JSON reply on stdout.  See
``shim.py`` for the wire protocol and ``host.py`` for the client that
adds timeout and crash classification.
"""

from .host import DEFAULT_SHIM, run_code

__all__ = ["DEFAULT_SHIM", "run_code"]
__version__ = "0.1.0"
