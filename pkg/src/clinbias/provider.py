"""Language-model backends, probe queries, and the on-disk result cache.

Two kinds of calls: forced-continuation log-probability (teacher forcing)
and free-text generation.  Every answered query can be cached in an
append-only JSONL store keyed by a content hash of the query, which makes
any run resumable: re-issuing the same batch skips answered queries.

The cache stores the full per-token logprob list, so joint and
first-token-only probability modes share cache entries.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import time
import warnings
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field

import requests

from .errors import (
    CapabilityError,
    IncompleteRunError,
    TransportError,
    ValidationError,
)


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 0.0
    max_tokens: int = 256
    seed: int | None = None

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValidationError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.temperature < 0:
            raise ValidationError(f"temperature must be >= 0, got {self.temperature}")


@dataclass(frozen=True)
class ContinuationQuery:
    model_id: str
    prompt: str
    continuation: str

    def __post_init__(self):
        if not self.model_id or not self.prompt or not self.continuation:
            raise ValidationError("model_id, prompt, and continuation must be non-empty")


@dataclass(frozen=True)
class GenerationQuery:
    model_id: str
    prompt: str
    params: DecodingParams = field(default_factory=DecodingParams)

    def __post_init__(self):
        if not self.model_id or not self.prompt:
            raise ValidationError("model_id and prompt must be non-empty")


@dataclass(frozen=True)
class ProbeResult:
    query: ContinuationQuery
    log_probability: float  # natural log, <= 0
    token_count: int
    timestamp: float
    token_logprobs: tuple  # full per-token list, kept for audit

    def __post_init__(self):
        if not (math.isfinite(self.log_probability) and self.log_probability <= 0.0):
            raise ValidationError(f"log_probability must be finite and <= 0, got {self.log_probability}")
        if self.token_count < 1:
            raise ValidationError(f"token_count must be >= 1, got {self.token_count}")

    @property
    def probability(self) -> float:
        return math.exp(self.log_probability)


@dataclass(frozen=True)
class GenerationResult:
    query: GenerationQuery
    text: str
    params: DecodingParams  # recorded verbatim for provenance
    timestamp: float


class Backend:
    """Base class; subclasses implement whichever calls they support.
    `calls` counts actual backend invocations (cache hits don't count)."""

    backend_id = "abstract"

    def __init__(self):
        self.calls = 0
        self._calls_lock = threading.Lock()

    def _count(self):
        with self._calls_lock:
            self.calls += 1

    def continuation_token_logprobs(self, model_id, prompt, continuation):
        raise CapabilityError(f"{self.backend_id} does not support continuation logprobs")

    def generate_text(self, model_id, prompt, params):
        raise CapabilityError(f"{self.backend_id} does not support generation")

    def embed_texts(self, model_id, texts):
        raise CapabilityError(f"{self.backend_id} does not support embeddings")


class HashMockBackend(Backend):
    """Deterministic fake model: one token per character, conditional
    logprob -(1 + m/1024) with m hashed from (model, context, char).

    Every logprob is a dyadic rational (multiple of 2^-10) with magnitude
    in [1, 2), so float64 sums over realistic lengths are exact and the
    log-space additivity law holds exactly, not approximately.
    """

    def __init__(self, backend_id="mock:hash", salt=""):
        super().__init__()
        self.backend_id = backend_id
        self.salt = salt

    def _char_logprob(self, model_id, context, ch):
        blob = "\x1f".join((self.salt, model_id, context, ch)).encode()
        m = int.from_bytes(hashlib.sha256(blob).digest()[:4], "big") % 1024
        return -(1.0 + m / 1024.0)

    def continuation_token_logprobs(self, model_id, prompt, continuation):
        self._count()
        out = []
        context = prompt
        for ch in continuation:
            out.append(self._char_logprob(model_id, context, ch))
            context += ch
        return out

    def generate_text(self, model_id, prompt, params):
        self._count()
        h = hashlib.sha256((model_id + "\x1f" + prompt).encode()).hexdigest()
        return f"1. mock condition {h[:8]}\n2. mock condition {h[8:16]}"


class UniformMockBackend(Backend):
    """Assigns the same probability to every continuation regardless of
    content: the zero-disparity baseline."""

    def __init__(self, probability=0.5, backend_id="mock:uniform"):
        super().__init__()
        if not 0.0 < probability <= 1.0:
            raise ValidationError("probability must be in (0, 1]")
        self.backend_id = backend_id
        self._logprob = math.log(probability)

    def continuation_token_logprobs(self, model_id, prompt, continuation):
        self._count()
        return [self._logprob]  # one pseudo-token spanning the continuation

    def generate_text(self, model_id, prompt, params):
        self._count()
        return ""


class TableMockBackend(Backend):
    """Fixture-table fake: exact lookups only, no fallbacks."""

    def __init__(
        self,
        logprob_table=None,
        generation_table=None,
        embedding_table=None,
        backend_id="mock:table",
    ):
        super().__init__()
        self.backend_id = backend_id
        self.logprob_table = dict(logprob_table or {})  # (prompt, continuation) -> [logprobs]
        self.generation_table = dict(generation_table or {})  # prompt -> text
        self.embedding_table = dict(embedding_table or {})  # text -> vector

    def continuation_token_logprobs(self, model_id, prompt, continuation):
        self._count()
        try:
            return list(self.logprob_table[(prompt, continuation)])
        except KeyError:
            raise CapabilityError(
                f"no fixture logprob entry for continuation {continuation!r}"
            ) from None

    def generate_text(self, model_id, prompt, params):
        self._count()
        try:
            return self.generation_table[prompt]
        except KeyError:
            raise CapabilityError(f"no fixture generation entry for prompt {prompt!r}") from None

    def embed_texts(self, model_id, texts):
        self._count()
        try:
            return [list(self.embedding_table[t]) for t in texts]
        except KeyError as e:
            raise CapabilityError(f"no fixture embedding entry for {e.args[0]!r}") from None


class FlakyBackend(Backend):
    """Wraps another backend and injects a transport failure after a set
    number of successful continuation calls; for resumability tests."""

    def __init__(self, inner: Backend, fail_after: int):
        super().__init__()
        self.inner = inner
        self.fail_after = fail_after
        self.backend_id = inner.backend_id

    def continuation_token_logprobs(self, model_id, prompt, continuation):
        with self._calls_lock:
            if self.calls >= self.fail_after:
                raise TransportError(f"injected failure after {self.fail_after} calls")
            self.calls += 1
        return self.inner.continuation_token_logprobs(model_id, prompt, continuation)

    def generate_text(self, model_id, prompt, params):
        return self.inner.generate_text(model_id, prompt, params)

    def embed_texts(self, model_id, texts):
        return self.inner.embed_texts(model_id, texts)


class _HttpBackend(Backend):
    """Shared POST-with-retries plumbing for the HTTP backends."""

    def __init__(self, base_url, auth_token=None, timeout=60.0, max_retries=2,
                 retry_delay=0.5, session=None):
        super().__init__()
        self.base_url = base_url.rstrip("/")
        self.auth_token = auth_token
        self.timeout = timeout
        self.max_retries = max_retries
        self.retry_delay = retry_delay
        self._session = session or requests.Session()
        self.backend_id = f"http:{self.base_url}"

    def _headers(self):
        headers = {"Content-Type": "application/json"}
        if self.auth_token:
            headers["Authorization"] = f"Bearer {self.auth_token}"
        return headers

    def _post(self, path, payload):
        error = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._session.post(
                    self.base_url + path, json=payload,
                    headers=self._headers(), timeout=self.timeout,
                )
            except requests.RequestException as e:
                error = TransportError(f"POST {path}: {e}")
            else:
                if resp.status_code in (408, 429) or resp.status_code >= 500:
                    error = TransportError(f"POST {path}: HTTP {resp.status_code}")
                elif resp.status_code >= 400:
                    raise CapabilityError(
                        f"POST {path}: HTTP {resp.status_code}: {resp.text[:200]}"
                    )
                else:
                    try:
                        return resp.json()
                    except ValueError as e:
                        raise CapabilityError(f"POST {path}: non-JSON response: {e}") from e
            if attempt < self.max_retries:
                time.sleep(self.retry_delay * (2 ** attempt))
        raise error


class JsonHttpBackend(_HttpBackend):
    """Speaks the toolkit's minimal JSON wire contract (documented
    bit-exactly in the README):

      POST {base}/v1/logprob   {"model","prompt","continuation"}
                               -> {"tokens": [...], "token_logprobs": [...]}
      POST {base}/v1/generate  {"model","prompt","params"} -> {"text": ...}
      POST {base}/v1/embed     {"model","texts"} -> {"embeddings": [[...]]}
    """

    def continuation_token_logprobs(self, model_id, prompt, continuation):
        self._count()
        data = self._post(
            "/v1/logprob",
            {"model": model_id, "prompt": prompt, "continuation": continuation},
        )
        lps = data.get("token_logprobs")
        if not isinstance(lps, list) or not lps:
            raise CapabilityError("backend returned no token_logprobs")
        return [float(x) for x in lps]

    def generate_text(self, model_id, prompt, params):
        self._count()
        data = self._post(
            "/v1/generate",
            {
                "model": model_id,
                "prompt": prompt,
                "params": {
                    "temperature": params.temperature,
                    "max_tokens": params.max_tokens,
                    "seed": params.seed,
                },
            },
        )
        if "text" not in data:
            raise CapabilityError("backend returned no text field")
        return str(data["text"])

    def embed_texts(self, model_id, texts):
        self._count()
        data = self._post("/v1/embed", {"model": model_id, "texts": list(texts)})
        embs = data.get("embeddings")
        if not isinstance(embs, list) or len(embs) != len(texts):
            raise CapabilityError("backend returned a malformed embeddings field")
        return embs


class OpenAICompatBackend(_HttpBackend):
    """Adapter for OpenAI-style completion endpoints that support
    echo + logprobs (pass the base URL up to and including /v1).

    Continuation logprobs are read from an echoed zero-token completion:
    the tokens whose text offset falls inside the continuation.  The
    prompt/continuation boundary must land on a token boundary, otherwise
    part of the mass would straddle the cut and the call is refused.
    """

    def continuation_token_logprobs(self, model_id, prompt, continuation):
        self._count()
        data = self._post(
            "/completions",
            {
                "model": model_id,
                "prompt": prompt + continuation,
                "max_tokens": 0,
                "echo": True,
                "logprobs": 0,
            },
        )
        try:
            choice = data["choices"][0]
        except (KeyError, IndexError):
            raise CapabilityError("completion response has no choices") from None
        lp = choice.get("logprobs")
        if not lp:
            raise CapabilityError("backend lacks logprob support (echo+logprobs)")
        offsets = lp.get("text_offset") or []
        token_lps = lp.get("token_logprobs") or []
        boundary = len(prompt)
        start = next((i for i, off in enumerate(offsets) if off >= boundary), None)
        if start is None:
            raise CapabilityError("continuation produced no echoed tokens")
        if offsets[start] != boundary:
            raise CapabilityError(
                "prompt/continuation boundary does not align with a token "
                "boundary; adjust the prompt template"
            )
        vals = token_lps[start:]
        if not vals or any(v is None for v in vals):
            raise CapabilityError("backend returned null logprobs for the continuation")
        return [float(v) for v in vals]

    def generate_text(self, model_id, prompt, params):
        self._count()
        payload = {
            "model": model_id,
            "prompt": prompt,
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
        }
        if params.seed is not None:
            payload["seed"] = params.seed
        data = self._post("/completions", payload)
        try:
            return str(data["choices"][0]["text"])
        except (KeyError, IndexError):
            raise CapabilityError("completion response has no choices") from None

    def embed_texts(self, model_id, texts):
        self._count()
        data = self._post("/embeddings", {"model": model_id, "input": list(texts)})
        try:
            return [item["embedding"] for item in data["data"]]
        except (KeyError, TypeError):
            raise CapabilityError("embedding response is malformed") from None


class ResultCache:
    """Append-only JSONL store keyed by a content hash of the query.

    Crash-safe: corrupt or torn lines are skipped with a warning on load.
    Concurrent appenders are safe (one O_APPEND write per entry).
    Duplicate keys resolve first-write-wins, so a resumed run preserves
    original timestamps and results byte for byte.
    """

    FILENAME = "results.jsonl"

    def __init__(self, directory):
        os.makedirs(str(directory), exist_ok=True)
        self.path = os.path.join(str(directory), self.FILENAME)
        self._lock = threading.Lock()
        self._entries = {}
        self._load()

    def _load(self):
        if not os.path.exists(self.path):
            return
        with open(self.path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    entry = json.loads(line)
                except ValueError:
                    warnings.warn(f"{self.path}:{n}: corrupt cache line skipped")
                    continue
                key = entry.get("key")
                if key and key not in self._entries:
                    self._entries[key] = entry

    def __len__(self):
        return len(self._entries)

    def lookup(self, key):
        with self._lock:
            return self._entries.get(key)

    def store(self, key, payload):
        entry = dict(payload)
        entry["key"] = key
        line = (json.dumps(entry, sort_keys=True) + "\n").encode()
        with self._lock:
            if key in self._entries:
                return self._entries[key]
            fd = os.open(self.path, os.O_APPEND | os.O_CREAT | os.O_WRONLY, 0o644)
            try:
                os.write(fd, line)
            finally:
                os.close(fd)
            self._entries[key] = entry
            return entry


def continuation_key(query: ContinuationQuery) -> str:
    blob = json.dumps(
        {
            "kind": "continuation",
            "model": query.model_id,
            "prompt": query.prompt,
            "continuation": query.continuation,
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()


def generation_key(query: GenerationQuery) -> str:
    blob = json.dumps(
        {
            "kind": "generation",
            "model": query.model_id,
            "prompt": query.prompt,
            "temperature": query.params.temperature,
            "max_tokens": query.params.max_tokens,
            "seed": query.params.seed,
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()


def cache_lookup(cache: ResultCache, key: str):
    return cache.lookup(key)


def cache_store(cache: ResultCache, key: str, payload: dict):
    return cache.store(key, payload)


def continuation_logprob(backend, query, cache=None, mode="joint") -> ProbeResult:
    """Answer one continuation query, through the cache when given.

    mode "joint" sums all continuation-token logprobs; "first_token"
    keeps only the first token's.  Both read the same cache entry.
    """
    if mode not in ("joint", "first_token"):
        raise ValidationError(f"unknown probe mode: {mode!r}")
    key = continuation_key(query)
    entry = cache.lookup(key) if cache is not None else None
    if entry is None:
        lps = backend.continuation_token_logprobs(
            query.model_id, query.prompt, query.continuation
        )
        if not lps:
            raise CapabilityError("backend returned an empty logprob list")
        # backends occasionally emit tiny positive logprobs from fp noise
        lps = [min(float(x), 0.0) for x in lps]
        if not all(math.isfinite(x) for x in lps):
            raise CapabilityError("backend returned non-finite logprobs")
        entry = {"kind": "continuation", "token_logprobs": lps, "timestamp": time.time()}
        if cache is not None:
            entry = cache.store(key, entry)
    lps = list(entry["token_logprobs"])
    if mode == "first_token":
        log_probability, token_count = lps[0], 1
    else:
        log_probability, token_count = sum(lps), len(lps)
    return ProbeResult(
        query=query,
        log_probability=log_probability,
        token_count=token_count,
        timestamp=entry["timestamp"],
        token_logprobs=tuple(lps),
    )


def generate(backend, query: GenerationQuery, cache=None) -> GenerationResult:
    """Answer one generation query, through the cache when given."""
    key = generation_key(query)
    entry = cache.lookup(key) if cache is not None else None
    if entry is None:
        text = backend.generate_text(query.model_id, query.prompt, query.params)
        entry = {"kind": "generation", "text": text, "timestamp": time.time()}
        if cache is not None:
            entry = cache.store(key, entry)
    return GenerationResult(
        query=query, text=entry["text"], params=query.params, timestamp=entry["timestamp"]
    )


class ProbeRunner:
    """Run a batch of queries through the cache with bounded concurrency.

    On transport failure the answered queries are already checkpointed in
    the cache; an IncompleteRunError reports the unanswered count and
    re-running the same batch resumes where it stopped.
    """

    def __init__(self, backend, cache=None, mode="joint", max_workers=4):
        self.backend = backend
        self.cache = cache
        self.mode = mode
        self.max_workers = max(1, int(max_workers))

    def run_continuations(self, queries) -> dict:
        queries = list(queries)
        results = {}
        failures = []
        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            futures = {
                pool.submit(continuation_logprob, self.backend, q, self.cache, self.mode): q
                for q in queries
            }
            for future in as_completed(futures):
                q = futures[future]
                try:
                    results[q] = future.result()
                except TransportError as e:
                    failures.append((q, e))
        if failures:
            raise IncompleteRunError(
                f"{len(failures)} of {len(set(queries))} probe queries unanswered "
                f"(first error: {failures[0][1]}); progress is checkpointed, "
                f"re-run the same command to resume"
            )
        return results

    def run_generations(self, queries) -> dict:
        queries = list(queries)
        results = {}
        failures = []
        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            futures = {
                pool.submit(generate, self.backend, q, self.cache): q for q in queries
            }
            for future in as_completed(futures):
                q = futures[future]
                try:
                    results[q] = future.result()
                except TransportError as e:
                    failures.append((q, e))
        if failures:
            raise IncompleteRunError(
                f"{len(failures)} of {len(set(queries))} generation queries unanswered "
                f"(first error: {failures[0][1]}); progress is checkpointed, "
                f"re-run the same command to resume"
            )
        return results
