"""Provider gateway: chat completions and embeddings over an OpenAI-style
HTTP surface, with a deterministic on-disk cache in front.

Caching is per sample: a logical request for ``n_samples`` completions is
stored as n records keyed by the same request with ``n_samples=1`` and
consecutive ``seed_index`` values. Providers that accept an ``n`` parameter
still get one network call; providers that do not are called once per sample.
Either way the cache ends up with identical records, so replays and path
accounting do not depend on provider capabilities.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Iterable, Protocol, Sequence

import requests

from .core import RmpotError

log = logging.getLogger(__name__)

CACHE_RECORD_VERSION = 1


class GatewayError(RmpotError):
    """Base class for provider/transport failures."""


class TransportError(GatewayError):
    """Network-level failure or repeated 5xx after retries."""


class ProviderError(GatewayError):
    """The provider answered but the reply is unusable (4xx, bad shape)."""


class CacheCorruption(GatewayError):
    """The cache directory cannot be used (I/O failure on write)."""


class DimensionMismatch(GatewayError):
    """Embedding vectors in one batch or bank disagree on dimension."""


@dataclass(frozen=True, slots=True)
class ChatRequest:
    """One sampling request. ``seed_index`` is a client-side disambiguator so
    repeated identical prompts (e.g. duplicate surface forms) stay distinct in
    the cache; it is also forwarded to the provider as ``seed``."""

    model: str
    messages: tuple[tuple[str, str], ...]
    temperature: float
    top_p: float
    top_k: int
    n_samples: int = 1
    seed_index: int = 0

    def last_user_content(self) -> str:
        for role, content in reversed(self.messages):
            if role == "user":
                return content
        return self.messages[-1][1] if self.messages else ""


def user_request(
    prompt: str,
    *,
    model: str,
    temperature: float,
    top_p: float,
    top_k: int,
    n_samples: int = 1,
    seed_index: int = 0,
) -> ChatRequest:
    return ChatRequest(
        model=model,
        messages=(("user", prompt),),
        temperature=temperature,
        top_p=top_p,
        top_k=top_k,
        n_samples=n_samples,
        seed_index=seed_index,
    )


@dataclass(frozen=True, slots=True)
class EmbeddingVec:
    """L2-normalized embedding."""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        norm = math.sqrt(sum(x * x for x in self.values))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"embedding is not unit-norm (|v|={norm!r})")

    @property
    def dim(self) -> int:
        return len(self.values)

    @staticmethod
    def normalized(values: Sequence[float]) -> "EmbeddingVec":
        norm = math.sqrt(sum(x * x for x in values))
        if norm == 0.0:
            raise ProviderError("provider returned a zero-norm embedding")
        return EmbeddingVec(tuple(x / norm for x in values))


def cache_key(req: ChatRequest) -> str:
    """Stable content hash of everything that shapes a completion."""
    payload = {
        "kind": "chat",
        "model": req.model,
        "messages": [[role, content] for role, content in req.messages],
        "temperature": req.temperature,
        "top_p": req.top_p,
        "top_k": req.top_k,
        "n_samples": req.n_samples,
        "seed_index": req.seed_index,
    }
    return _digest(payload)


def embed_cache_key(model: str, text: str) -> str:
    return _digest({"kind": "embedding", "model": model, "text": text})


def _digest(payload: object) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class DiskCache:
    """One JSON file per key. Records carry a checksum; records that fail the
    integrity check are logged and treated as misses rather than errors."""

    def __init__(self, directory: str):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)

    def _path(self, key: str) -> str:
        return os.path.join(self.directory, f"{key}.json")

    def get(self, key: str) -> list[str] | None:
        path = self._path(key)
        try:
            with open(path, "r", encoding="utf-8") as fh:
                record = json.load(fh)
        except FileNotFoundError:
            return None
        except (OSError, json.JSONDecodeError) as exc:
            log.warning("unreadable cache record %s: %s", path, exc)
            return None
        if not isinstance(record, dict) or record.get("version") != CACHE_RECORD_VERSION:
            log.warning("cache record %s has unknown version; ignoring", path)
            return None
        completions = record.get("completions")
        if not isinstance(completions, list) or not all(isinstance(c, str) for c in completions):
            log.warning("cache record %s is malformed; ignoring", path)
            return None
        if record.get("checksum") != _completions_checksum(completions):
            log.warning("cache record %s failed its integrity check; ignoring", path)
            return None
        return completions

    def put(self, key: str, request_digest: str, completions: list[str]) -> None:
        record = {
            "version": CACHE_RECORD_VERSION,
            "request_digest": request_digest,
            "completions": completions,
            "created_at": datetime.now(timezone.utc).isoformat(),
            "checksum": _completions_checksum(completions),
        }
        path = self._path(key)
        try:
            fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(record, fh, ensure_ascii=False)
            os.replace(tmp, path)
        except OSError as exc:
            raise CacheCorruption(f"cannot write cache record {path}: {exc}") from exc

    def stats(self) -> tuple[int, int]:
        """(record count, total bytes)."""
        count = 0
        total = 0
        try:
            names = os.listdir(self.directory)
        except OSError:
            return (0, 0)
        for name in names:
            if not name.endswith(".json"):
                continue
            count += 1
            try:
                total += os.path.getsize(os.path.join(self.directory, name))
            except OSError:
                pass
        return (count, total)

    def clear(self) -> int:
        removed = 0
        for name in os.listdir(self.directory):
            if name.endswith(".json"):
                try:
                    os.remove(os.path.join(self.directory, name))
                    removed += 1
                except OSError:
                    pass
        return removed


def _completions_checksum(completions: Iterable[str]) -> str:
    return _digest(list(completions))


class Transport(Protocol):
    supports_n: bool

    def complete(self, req: ChatRequest) -> list[str]:
        ...

    def embed_many(self, texts: Sequence[str], model: str) -> list[list[float]]:
        ...


class HttpTransport:
    """OpenAI-compatible HTTP backend.

    Retry policy: up to 3 attempts with exponential backoff (base 1s) on
    transport failures and 5xx responses only. 4xx responses surface
    immediately as ProviderError with the provider's message.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str = "",
        *,
        timeout_s: float = 120.0,
        max_attempts: int = 3,
        backoff_s: float = 1.0,
        send_top_k: bool = True,
        supports_n: bool = True,
        sleep=time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout_s = timeout_s
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self.send_top_k = send_top_k
        self.supports_n = supports_n
        self._sleep = sleep
        self._session = requests.Session()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _post(self, path: str, body: dict) -> dict:
        url = self.base_url + path
        last_error: GatewayError | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                self._sleep(self.backoff_s * (2 ** (attempt - 1)))
            try:
                resp = self._session.post(url, json=body, headers=self._headers(), timeout=self.timeout_s)
            except requests.RequestException as exc:
                last_error = TransportError(f"request to {url} failed: {exc}")
                continue
            if resp.status_code >= 500:
                last_error = TransportError(f"{url} answered {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise ProviderError(f"{url} rejected the request ({resp.status_code}): {resp.text[:500]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise ProviderError(f"{url} returned a non-JSON body") from exc
        assert last_error is not None
        raise last_error

    def complete(self, req: ChatRequest) -> list[str]:
        body: dict = {
            "model": req.model,
            "messages": [{"role": role, "content": content} for role, content in req.messages],
            "temperature": req.temperature,
            "top_p": req.top_p,
            "n": req.n_samples,
            "seed": req.seed_index,
        }
        if self.send_top_k:
            body["top_k"] = req.top_k
        data = self._post("/chat/completions", body)
        try:
            texts = [str(choice["message"]["content"]) for choice in data["choices"]]
        except (KeyError, TypeError) as exc:
            raise ProviderError(f"malformed chat completion reply: {exc}") from exc
        if len(texts) != req.n_samples:
            raise ProviderError(f"asked for {req.n_samples} samples, provider sent {len(texts)}")
        return texts

    def embed_many(self, texts: Sequence[str], model: str) -> list[list[float]]:
        data = self._post("/embeddings", {"model": model, "input": list(texts)})
        try:
            rows = sorted(data["data"], key=lambda row: row.get("index", 0))
            vectors = [[float(x) for x in row["embedding"]] for row in rows]
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderError(f"malformed embeddings reply: {exc}") from exc
        if len(vectors) != len(texts):
            raise ProviderError(f"asked for {len(texts)} embeddings, provider sent {len(vectors)}")
        return vectors


class Gateway:
    """Cache-fronted access to one provider. Thread-safe; keeps counters so
    tests and the CLI can observe cache behaviour (a warmed cache means zero
    transport calls)."""

    def __init__(self, transport: Transport, cache: DiskCache | None = None):
        self.transport = transport
        self.cache = cache
        self.transport_calls = 0
        self.cache_hits = 0
        self.cache_misses = 0
        self.chat_log: list[ChatRequest] = []
        self._lock = threading.Lock()

    # ------------------------------- chat --------------------------------

    def chat(self, req: ChatRequest) -> list[str]:
        """Return exactly ``req.n_samples`` completions for the request."""
        if req.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        with self._lock:
            self.chat_log.append(req)
        sample_reqs = [
            dataclasses.replace(req, n_samples=1, seed_index=req.seed_index + i)
            for i in range(req.n_samples)
        ]
        keys = [cache_key(r) for r in sample_reqs]
        results: list[str | None] = [None] * req.n_samples
        if self.cache is not None:
            for i, key in enumerate(keys):
                hit = self.cache.get(key)
                if hit:
                    results[i] = hit[0]
            with self._lock:
                hits = sum(1 for r in results if r is not None)
                self.cache_hits += hits
                self.cache_misses += req.n_samples - hits
        missing = [i for i, r in enumerate(results) if r is None]
        if missing:
            if self.transport.supports_n and len(missing) == req.n_samples:
                texts = self._call(req)
                for i, text in enumerate(texts):
                    results[i] = text
                    self._store(keys[i], sample_reqs[i], text)
            else:
                for i in missing:
                    texts = self._call(sample_reqs[i])
                    results[i] = texts[0]
                    self._store(keys[i], sample_reqs[i], texts[0])
        assert all(r is not None for r in results)
        return [r for r in results if r is not None]

    def _call(self, req: ChatRequest) -> list[str]:
        with self._lock:
            self.transport_calls += 1
        texts = self.transport.complete(req)
        if len(texts) != req.n_samples:
            raise ProviderError(f"asked for {req.n_samples} samples, transport sent {len(texts)}")
        return texts

    def _store(self, key: str, sample_req: ChatRequest, text: str) -> None:
        if self.cache is not None:
            self.cache.put(key, cache_key(sample_req), [text])

    # ----------------------------- embeddings -----------------------------

    def embed(self, texts: Sequence[str], model: str) -> list[EmbeddingVec]:
        """Embed a batch of texts; every returned vector is L2-normalized."""
        if not texts:
            raise ValueError("embed requires at least one text")
        keys = [embed_cache_key(model, text) for text in texts]
        vectors: list[EmbeddingVec | None] = [None] * len(texts)
        if self.cache is not None:
            for i, key in enumerate(keys):
                record = self.cache.get(key)
                if record:
                    try:
                        vectors[i] = EmbeddingVec(tuple(float(x) for x in json.loads(record[0])))
                    except (ValueError, TypeError, json.JSONDecodeError):
                        log.warning("ignoring malformed cached embedding for key %s", key)
            with self._lock:
                hits = sum(1 for v in vectors if v is not None)
                self.cache_hits += hits
                self.cache_misses += len(texts) - hits
        missing = [i for i, v in enumerate(vectors) if v is None]
        if missing:
            with self._lock:
                self.transport_calls += 1
            raw = self.transport.embed_many([texts[i] for i in missing], model)
            for slot, values in zip(missing, raw):
                vectors[slot] = EmbeddingVec.normalized(values)
                if self.cache is not None:
                    self.cache.put(
                        keys[slot],
                        embed_cache_key(model, texts[slot]),
                        [json.dumps(list(vectors[slot].values))],
                    )
        dims = {v.dim for v in vectors if v is not None}
        if len(dims) > 1:
            raise DimensionMismatch(f"embeddings disagree on dimension: {sorted(dims)}")
        return [v for v in vectors if v is not None]

    # ------------------------------ metrics -------------------------------

    def stats_line(self) -> str:
        return (
            f"transport_calls={self.transport_calls} "
            f"cache_hits={self.cache_hits} cache_misses={self.cache_misses}"
        )

    def sampled_counts(self, classify) -> dict[str, int]:
        """Sum n_samples per class of logged request; ``classify`` maps the
        last user message to a class name (or None to skip)."""
        counts: dict[str, int] = {}
        for req in self.chat_log:
            label = classify(req.last_user_content())
            if label is not None:
                counts[label] = counts.get(label, 0) + req.n_samples
        return counts
