"""Chat-completion client: transport, caching, label parsing, scoring.

Speaks HTTP POST ``/v1/chat/completions`` with a JSON body of
``{model, messages, temperature, max_tokens, logprobs}`` and expects
``{choices: [{message: {content}, logprobs?}]}`` back. Identical requests
(same model, messages, temperature, max_new_tokens) are served from an
in-memory cache backed by an optional on-disk cache, concurrent duplicates
collapse to one network call, and transient failures retry with
exponential backoff.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .serialize import (
    DescriptionCheck,
    NumericBlock,
    build_description_prompt,
    validate_description,
)

log = logging.getLogger(__name__)

COMPLETIONS_PATH = "/v1/chat/completions"

ENV_BASE_URL = "EHRLLM_BASE_URL"
ENV_API_KEY = "EHRLLM_API_KEY"
ENV_PARALLELISM = "EHRLLM_PARALLELISM"
ENV_CACHE_DIR = "EHRLLM_CACHE_DIR"

RETRY_STATUSES = frozenset({429, 500, 502, 503, 504})

_NUMBER = re.compile(r"\d*\.?\d+")
_NORMALIZE = re.compile(r"[^0-9a-z]+")


class TransportError(RuntimeError):
    """Endpoint unreachable or still failing after all retries."""


class EndpointError(RuntimeError):
    """Endpoint answered with a non-retryable error status."""

    def __init__(self, status: int, body: str):
        super().__init__(f"endpoint returned HTTP {status}: {body[:500]}")
        self.status = status
        self.body = body


class ResponseFormatError(RuntimeError):
    """Endpoint answered 2xx but the body is not a chat completion."""


@dataclass(frozen=True)
class LabelSchema:
    """Canonical labels for a task plus normalized alias surface forms."""

    task: str
    labels: tuple[str, ...]
    aliases: dict[str, str] = field(default_factory=dict)
    fallback: str = ""

    def __post_init__(self):
        if not self.labels:
            raise ValueError("schema needs at least one label")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("schema labels must be unique")
        normalized = {normalize_label_text(k): v for k, v in self.aliases.items()}
        for alias, label in normalized.items():
            if label not in self.labels:
                raise ValueError(f"alias {alias!r} maps to unknown label {label!r}")
        object.__setattr__(self, "aliases", normalized)
        fallback = self.fallback or self.labels[-1]
        if fallback not in self.labels:
            raise ValueError(f"fallback {fallback!r} not among labels")
        object.__setattr__(self, "fallback", fallback)


@dataclass(frozen=True)
class InferenceRequest:
    model: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_new_tokens: int = 64
    want_logprobs: bool = False

    def __post_init__(self):
        if not self.messages:
            raise ValueError("messages must be nonempty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @classmethod
    def user(cls, model: str, content: str, **kw) -> "InferenceRequest":
        return cls(model=model, messages=(("user", content),), **kw)


@dataclass(frozen=True)
class InferenceResponse:
    text: str
    logprobs: dict | None
    latency_ms: int
    from_cache: bool


@dataclass(frozen=True)
class Classification:
    label: str
    raw_text: str
    unparsed: bool
    latency_ms: int


@dataclass(frozen=True)
class Score:
    value: float
    raw_text: str
    unparsed: bool
    latency_ms: int


@dataclass(frozen=True)
class DescriptionResult:
    text: str
    check: DescriptionCheck
    latency_ms: int


@dataclass
class EndpointConfig:
    """Connection and decoding settings for one chat-completion endpoint."""

    base_url: str
    model: str = "default"
    api_key: str | None = None
    temperature: float = 0.0
    description_temperature: float = 0.2
    max_new_tokens: int = 64
    description_max_new_tokens: int = 256
    want_logprobs: bool = True
    timeout_s: float = 30.0
    max_retries: int = 3
    backoff_base_s: float = 0.25
    backoff_cap_s: float = 8.0
    parallelism: int = 4
    cache_dir: str | None = None

    @classmethod
    def from_env(cls, **overrides) -> "EndpointConfig":
        values = {
            "base_url": os.environ.get(ENV_BASE_URL, ""),
            "api_key": os.environ.get(ENV_API_KEY),
            "cache_dir": os.environ.get(ENV_CACHE_DIR),
        }
        if os.environ.get(ENV_PARALLELISM):
            values["parallelism"] = int(os.environ[ENV_PARALLELISM])
        values.update(overrides)
        if not values["base_url"]:
            raise ValueError(f"no endpoint base URL: set {ENV_BASE_URL} or pass base_url")
        return cls(**values)


def cache_key(req: InferenceRequest) -> str:
    """Content hash identifying a request for caching and deduplication."""
    doc = {
        "model": req.model,
        "messages": [{"role": r, "content": c} for r, c in req.messages],
        "temperature": req.temperature,
        "max_new_tokens": req.max_new_tokens,
    }
    blob = json.dumps(doc, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def normalize_label_text(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace."""
    return _NORMALIZE.sub(" ", text.lower()).strip()


def match_label(raw: str, schema: LabelSchema) -> tuple[str, bool]:
    """Map a generation to exactly one canonical label (total function).

    Order: exact normalized label, exact alias, then a word-boundary
    substring search over labels and aliases taking the longest match.
    Anything still unmatched falls back to the schema fallback with the
    unparsed flag set.
    """
    norm = normalize_label_text(raw)
    by_norm = {normalize_label_text(label): label for label in schema.labels}
    if norm in by_norm:
        return by_norm[norm], False
    if norm in schema.aliases:
        return schema.aliases[norm], False
    surfaces = list(by_norm.items()) + list(schema.aliases.items())
    surfaces.sort(key=lambda kv: -len(kv[0]))
    for surface, label in surfaces:
        if surface and re.search(rf"\b{re.escape(surface)}\b", norm):
            return label, False
    return schema.fallback, True


def parse_score_text(raw: str) -> float | None:
    """First real number in [0, 1] appearing in the generation, if any."""
    for m in _NUMBER.finditer(raw):
        value = float(m.group(0))
        if value <= 1.0:
            return value
    return None


def _logprob_score(logprobs: dict, positive: str, negative: str) -> float | None:
    """Probability mass of the positive token among the two first-token
    alternatives, or None when either is missing."""
    try:
        alternatives = logprobs["content"][0]["top_logprobs"]
    except (KeyError, IndexError, TypeError):
        return None
    pos_norm = normalize_label_text(positive)
    neg_norm = normalize_label_text(negative)
    lp_pos = lp_neg = None
    for alt in alternatives:
        tok = normalize_label_text(str(alt.get("token", "")))
        if not tok:
            continue
        if lp_pos is None and (tok == pos_norm or pos_norm.startswith(tok)):
            lp_pos = float(alt["logprob"])
        elif lp_neg is None and (tok == neg_norm or neg_norm.startswith(tok)):
            lp_neg = float(alt["logprob"])
    if lp_pos is None or lp_neg is None:
        return None
    return 1.0 / (1.0 + math.exp(lp_neg - lp_pos))


class ChatClient:
    """Thread-safe client for one endpoint, with caching and retries."""

    def __init__(self, cfg: EndpointConfig):
        self.cfg = cfg
        self._semaphore = threading.BoundedSemaphore(cfg.parallelism)
        self._lock = threading.Lock()
        self._memory: dict[str, dict] = {}
        self._inflight: dict[str, threading.Event] = {}
        self._local = threading.local()
        if cfg.cache_dir:
            Path(cfg.cache_dir).mkdir(parents=True, exist_ok=True)

    # -- transport ---------------------------------------------------------

    def _session(self) -> requests.Session:
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def _disk_path(self, key: str) -> Path | None:
        return Path(self.cfg.cache_dir) / f"{key}.json" if self.cfg.cache_dir else None

    def _cache_get(self, key: str) -> dict | None:
        with self._lock:
            if key in self._memory:
                return self._memory[key]
        path = self._disk_path(key)
        if path and path.exists():
            payload = json.loads(path.read_text("utf-8"))
            with self._lock:
                self._memory[key] = payload
            return payload
        return None

    def _cache_put(self, key: str, payload: dict) -> None:
        with self._lock:
            self._memory[key] = payload
        path = self._disk_path(key)
        if path:
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps(payload, ensure_ascii=False), "utf-8")
            os.replace(tmp, path)

    def _post_once(self, body: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.cfg.api_key:
            headers["Authorization"] = f"Bearer {self.cfg.api_key}"
        resp = self._session().post(
            self.cfg.base_url.rstrip("/") + COMPLETIONS_PATH,
            json=body,
            headers=headers,
            timeout=self.cfg.timeout_s,
        )
        if resp.status_code in RETRY_STATUSES:
            raise _Retryable(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if not 200 <= resp.status_code < 300:
            raise EndpointError(resp.status_code, resp.text)
        try:
            doc = resp.json()
            choice = doc["choices"][0]
            text = choice["message"]["content"]
            if not isinstance(text, str):
                raise TypeError("content is not a string")
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ResponseFormatError(f"malformed completion body: {exc}") from exc
        return {"text": text, "logprobs": choice.get("logprobs")}

    def _post_with_retries(self, req: InferenceRequest) -> dict:
        body = {
            "model": req.model,
            "messages": [{"role": r, "content": c} for r, c in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_new_tokens,
            "logprobs": req.want_logprobs,
        }
        attempt = 0
        with self._semaphore:
            while True:
                try:
                    return self._post_once(body)
                except (_Retryable, requests.Timeout, requests.ConnectionError) as exc:
                    if attempt >= self.cfg.max_retries:
                        raise TransportError(
                            f"request failed after {attempt} retries: {exc}"
                        ) from exc
                    delay = min(self.cfg.backoff_base_s * 2**attempt, self.cfg.backoff_cap_s)
                    log.debug("transient failure (%s); retry %d in %.2fs", exc, attempt + 1, delay)
                    time.sleep(delay)
                    attempt += 1

    # -- operations --------------------------------------------------------

    def complete(self, req: InferenceRequest, use_cache: bool = True) -> InferenceResponse:
        """Run one chat completion, deduplicating and caching by content."""
        key = cache_key(req)
        if use_cache:
            cached = self._cache_get(key)
            if cached is not None:
                return InferenceResponse(cached["text"], cached.get("logprobs"), 0, True)
        else:
            start = time.perf_counter()
            payload = self._post_with_retries(req)
            latency = int((time.perf_counter() - start) * 1000)
            return InferenceResponse(payload["text"], payload.get("logprobs"), latency, False)

        while True:
            with self._lock:
                cached = self._memory.get(key)
                if cached is not None:
                    return InferenceResponse(cached["text"], cached.get("logprobs"), 0, True)
                waiter = self._inflight.get(key)
                if waiter is None:
                    self._inflight[key] = threading.Event()
            if waiter is not None:
                waiter.wait()  # leader finished (or failed); re-check the cache
                cached = self._cache_get(key)
                if cached is not None:
                    return InferenceResponse(cached["text"], cached.get("logprobs"), 0, True)
                continue  # leader failed; become the new leader
            try:
                start = time.perf_counter()
                payload = self._post_with_retries(req)
                latency = int((time.perf_counter() - start) * 1000)
                self._cache_put(key, payload)
            finally:
                with self._lock:
                    self._inflight.pop(key).set()
            return InferenceResponse(payload["text"], payload.get("logprobs"), latency, False)

    def classify(self, prompt: str, schema: LabelSchema) -> Classification:
        """Generate and map the output onto the schema's canonical labels."""
        req = InferenceRequest.user(
            self.cfg.model,
            prompt,
            temperature=self.cfg.temperature,
            max_new_tokens=self.cfg.max_new_tokens,
        )
        resp = self.complete(req)
        label, unparsed = match_label(resp.text, schema)
        return Classification(label, resp.text, unparsed, resp.latency_ms)

    def score(self, prompt: str, positive: str = "yes", negative: str = "no") -> Score:
        """Produce a graded score in [0, 1] for a binary outcome question.

        Prefers the probability mass of the positive first token when the
        endpoint returns logprobs; otherwise parses the first number in
        [0, 1] from the generation; otherwise 0.5 with the unparsed flag.
        """
        req = InferenceRequest.user(
            self.cfg.model,
            prompt,
            temperature=self.cfg.temperature,
            max_new_tokens=self.cfg.max_new_tokens,
            want_logprobs=self.cfg.want_logprobs,
        )
        resp = self.complete(req)
        if resp.logprobs:
            value = _logprob_score(resp.logprobs, positive, negative)
            if value is not None:
                return Score(value, resp.text, False, resp.latency_ms)
        value = parse_score_text(resp.text)
        if value is not None:
            return Score(value, resp.text, False, resp.latency_ms)
        return Score(0.5, resp.text, True, resp.latency_ms)

    def generate_description(
        self, block: NumericBlock, template: str | None = None
    ) -> DescriptionResult:
        """Ask the endpoint for a prose summary of the numeric block."""
        prompt = build_description_prompt(block, template)
        req = InferenceRequest.user(
            self.cfg.model,
            prompt,
            temperature=self.cfg.description_temperature,
            max_new_tokens=self.cfg.description_max_new_tokens,
        )
        resp = self.complete(req)
        check = validate_description(resp.text)
        if check.violations:
            log.warning("generated description violates constraints: %s", check.violations)
        return DescriptionResult(resp.text, check, resp.latency_ms)


class _Retryable(Exception):
    pass
