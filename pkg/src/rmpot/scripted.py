"""Scripted transport for offline runs and tests.

A mock script is a JSON document:

    {
      "embed_dim": 16,
      "rules": [
        {"match": "Reformulate the following", "echo": true, "prefix": "Rephrased: "},
        {"match": "marbles", "completions": ["```\\nans = 40\\n```"]}
      ],
      "default": ["I do not know."],
      "embeddings": {"geometry": [1, 0, 0, 0]}
    }

Rules are tried in order against the last user message; the first whose
``match`` substring occurs wins. A rule either replays its ``completions``
(indexed by the request's seed so batched and sequential sampling replay
identically) or, with ``echo``, returns the problem text extracted from a
rewrite prompt, optionally decorated with a ``prefix`` (any ``{i}`` in the
prefix becomes the sample's seed). Embeddings are deterministic hash vectors
unless an ``embeddings`` entry's key occurs in the text.
"""

from __future__ import annotations

import hashlib
import json
from typing import Mapping, Sequence

from .gateway import ChatRequest, ProviderError
from .reformulate import INCONTEXT_HEADER, NAIVE_PREFIX


def load_mock_script(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        script = json.load(fh)
    if not isinstance(script, dict):
        raise ValueError(f"mock script {path} must be a JSON object")
    return script


def extract_problem_text(prompt: str) -> str:
    """Recover the problem statement from either rewrite prompt shape."""
    if prompt.startswith(NAIVE_PREFIX):
        return prompt[len(NAIVE_PREFIX):]
    if prompt.startswith(INCONTEXT_HEADER) and prompt.endswith("\nReformulated:"):
        body = prompt[: -len("\nReformulated:")]
        marker = body.rfind("Original: ")
        if marker >= 0:
            return body[marker + len("Original: "):]
    return prompt


class ScriptedTransport:
    """Deterministic stand-in for a provider; counts calls for assertions."""

    supports_n = True

    def __init__(self, script: Mapping | None = None):
        script = dict(script or {})
        self.rules: list[dict] = list(script.get("rules", []))
        self.default: list[str] | None = script.get("default")
        self.embed_dim: int = int(script.get("embed_dim", 16))
        self.embedding_overrides: dict[str, list[float]] = dict(script.get("embeddings", {}))
        self.complete_calls = 0
        self.embed_calls = 0

    def complete(self, req: ChatRequest) -> list[str]:
        self.complete_calls += 1
        content = req.last_user_content()
        rule = self._find_rule(content)
        samples: list[str] = []
        for j in range(req.n_samples):
            seed = req.seed_index + j
            if rule is not None and rule.get("echo"):
                prefix = str(rule.get("prefix", "")).replace("{i}", str(seed))
                samples.append(prefix + extract_problem_text(content))
            elif rule is not None:
                completions = rule.get("completions", [])
                if not completions:
                    raise ProviderError("mock rule has no completions")
                samples.append(str(completions[seed % len(completions)]))
            elif self.default is not None:
                samples.append(str(self.default[seed % len(self.default)]))
            else:
                raise ProviderError(f"no mock rule matches: {content[:120]!r}")
        return samples

    def _find_rule(self, content: str) -> dict | None:
        for rule in self.rules:
            if str(rule.get("match", "")) in content:
                return rule
        return None

    def embed_many(self, texts: Sequence[str], model: str) -> list[list[float]]:
        self.embed_calls += 1
        out: list[list[float]] = []
        for text in texts:
            vector = self._override_for(text)
            out.append(vector if vector is not None else hash_vector(text, self.embed_dim))
        return out

    def _override_for(self, text: str) -> list[float] | None:
        for needle, vector in self.embedding_overrides.items():
            if needle in text:
                return [float(x) for x in vector]
        return None


def hash_vector(text: str, dim: int) -> list[float]:
    """Deterministic pseudo-embedding: bytes of repeated SHA-256 mapped to
    [-1, 1]. Not semantically meaningful, just stable."""
    out: list[float] = []
    counter = 0
    while len(out) < dim:
        digest = hashlib.sha256(f"{counter}\x00{text}".encode("utf-8")).digest()
        for b in digest:
            out.append((b / 127.5) - 1.0)
            if len(out) == dim:
                break
        counter += 1
    if all(x == 0.0 for x in out):  # vanishingly unlikely; keep norms positive
        out[0] = 1.0
    return out
