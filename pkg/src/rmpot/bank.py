"""Domain-aware few-shot retrieval.

A bank is an immutable set of (question, solution) exemplars, each labeled
with a domain and carrying a unit-norm embedding of its question text. An
incoming problem is first classified to the domain whose centroid (normalized
mean of member vectors) it is most similar to, then the top-k most similar
entries of that one domain are returned. Retrieval is an exact full scan —
banks are small enough that an approximate index would only add ways to be
wrong.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .core import ParseError, PreconditionError, Problem, RmpotError
from .gateway import DimensionMismatch, EmbeddingVec

BANK_VERSION = 1


class DuplicateId(RmpotError):
    """Two bank entries claimed the same id."""


@dataclass(frozen=True, slots=True)
class BankEntry:
    id: str
    question: str
    solution: str
    domain: str
    vector: EmbeddingVec

    def __post_init__(self) -> None:
        if not self.domain.strip():
            raise PreconditionError(f"entry {self.id!r} has a blank domain")


@dataclass(frozen=True, slots=True)
class Domain:
    name: str
    centroid: EmbeddingVec


@dataclass(frozen=True, slots=True)
class Bank:
    entries: tuple[BankEntry, ...]
    domains: tuple[Domain, ...]  # sorted by name

    @property
    def dim(self) -> int:
        return self.entries[0].vector.dim


def cosine_sim(u: EmbeddingVec, v: EmbeddingVec) -> float:
    """Dot product of two unit vectors; plain Python so the arithmetic is
    auditable against an independent oracle."""
    if u.dim != v.dim:
        raise DimensionMismatch(f"cosine over dims {u.dim} and {v.dim}")
    total = 0.0
    for a, b in zip(u.values, v.values):
        total += a * b
    return total


def _normalized_mean(vectors: Sequence[EmbeddingVec]) -> EmbeddingVec:
    dim = vectors[0].dim
    sums = [0.0] * dim
    for vec in vectors:
        for i, x in enumerate(vec.values):
            sums[i] += x
    mean = [s / len(vectors) for s in sums]
    return EmbeddingVec.normalized(tuple(mean))


def _compute_domains(entries: Sequence[BankEntry]) -> tuple[Domain, ...]:
    members: dict[str, list[EmbeddingVec]] = {}
    for entry in entries:
        members.setdefault(entry.domain, []).append(entry.vector)
    return tuple(
        Domain(name=name, centroid=_normalized_mean(vecs))
        for name, vecs in sorted(members.items())
    )


def build_bank(pairs: Sequence[Mapping], gateway, model: str) -> Bank:
    """Embed every question (one batch) and assemble the bank.

    Each pair needs question/solution/domain; id is optional and defaults to
    the position (e00000, e00001, ...). Identical inputs always rebuild the
    identical bank.
    """
    if not pairs:
        raise PreconditionError("bank needs at least one entry")
    questions = [str(p["question"]) for p in pairs]
    vectors = gateway.embed(questions, model)
    entries: list[BankEntry] = []
    seen: set[str] = set()
    for i, (pair, vector) in enumerate(zip(pairs, vectors)):
        entry_id = str(pair.get("id") or f"e{i:05d}")
        if entry_id in seen:
            raise DuplicateId(f"bank id {entry_id!r} appears more than once")
        seen.add(entry_id)
        entries.append(
            BankEntry(
                id=entry_id,
                question=str(pair["question"]),
                solution=str(pair["solution"]),
                domain=str(pair["domain"]),
                vector=vector,
            )
        )
    return Bank(entries=tuple(entries), domains=_compute_domains(entries))


def classify_domain(problem: Problem, bank: Bank, gateway, model: str) -> Domain:
    """The domain whose centroid is most similar to the problem text; ties go
    to the lexicographically smaller name (domains are stored sorted)."""
    if not bank.domains:
        raise PreconditionError("bank has no domains")
    query = gateway.embed([problem.text], model)[0]
    best: Domain | None = None
    best_sim = float("-inf")
    for domain in bank.domains:
        sim = cosine_sim(query, domain.centroid)
        if sim > best_sim:
            best, best_sim = domain, sim
    assert best is not None
    return best


def retrieve_topk(problem: Problem, bank: Bank, gateway, model: str, k: int = 5) -> list[BankEntry]:
    """Classify, then rank that domain's entries by similarity (descending,
    ties by id) and return the first k."""
    if not bank.entries:
        raise PreconditionError("bank is empty")
    domain = classify_domain(problem, bank, gateway, model)
    query = gateway.embed([problem.text], model)[0]
    candidates = [e for e in bank.entries if e.domain == domain.name]
    ranked = sorted(candidates, key=lambda e: (-cosine_sim(query, e.vector), e.id))
    return ranked[:k]


def save_bank(bank: Bank, path: str | Path) -> None:
    """Header line, then one record per entry; written atomically."""
    path = Path(path)
    header = {
        "version": BANK_VERSION,
        "dim": bank.dim,
        "domains": [d.name for d in bank.domains],
    }
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for entry in bank.entries:
                record = {
                    "id": entry.id,
                    "question": entry.question,
                    "solution": entry.solution,
                    "domain": entry.domain,
                    "vector": list(entry.vector.values),
                }
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise


def load_bank(path: str | Path) -> Bank:
    """Read a bank file; centroids are recomputed from the records in file
    order, so a round-trip reproduces the built bank exactly."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read bank file {path}: {exc}") from exc
    if not lines:
        raise ParseError(f"bank file {path} is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:1: bad bank header: {exc}") from exc
    if not isinstance(header, dict) or header.get("version") != BANK_VERSION:
        raise ParseError(f"{path}:1: unsupported bank header {header!r}")
    dim = header.get("dim")
    entries: list[BankEntry] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            vector = EmbeddingVec(tuple(float(x) for x in rec["vector"]))
            entry = BankEntry(
                id=str(rec["id"]),
                question=str(rec["question"]),
                solution=str(rec["solution"]),
                domain=str(rec["domain"]),
                vector=vector,
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}:{lineno}: bad bank record: {exc}") from exc
        if entry.vector.dim != dim:
            raise ParseError(f"{path}:{lineno}: vector dim {entry.vector.dim} != header dim {dim}")
        if entry.id in seen:
            raise DuplicateId(f"{path}:{lineno}: duplicate id {entry.id!r}")
        seen.add(entry.id)
        entries.append(entry)
    if not entries:
        raise ParseError(f"bank file {path} has a header but no entries")
    return Bank(entries=tuple(entries), domains=_compute_domains(entries))
