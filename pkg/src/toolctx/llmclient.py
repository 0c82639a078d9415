"""Chat-completion and embedding backends with throttling and retries.

Backends implement ``complete(request) -> CompletionResponse`` and optionally
``embed(texts) -> list[np.ndarray]``. :class:`LLMClient` wraps any backend
with the concurrency ceiling, rolling-window rate limit and exponential
backoff described by :class:`ThrottlePolicy`.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import logging
import math
import random
import re
import threading
import time
import urllib.error
import urllib.request
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class BackendError(Exception):
    pass


class TransientBackendError(BackendError):
    """Retryable failure: throttling, timeouts, 5xx."""


class BackendConfigError(BackendError):
    """Non-retryable failure: bad credentials, bad endpoint, no scripted route."""


class EmptyResponseError(BackendError):
    pass


class RetriesExhaustedError(BackendError):
    def __init__(self, attempts: int, last_error: Exception | None):
        super().__init__(f"gave up after {attempts} attempts: {last_error}")
        self.attempts = attempts
        self.last_error = last_error


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    model: str = "default"
    temperature: float = 0.0
    top_p: float = 1.0
    max_tokens: int = 4096
    role: str = "inference"

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be > 0")


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    usage: dict = field(default_factory=dict)
    latency: float = 0.0
    retry_count: int = 0


class ChatBackend(Protocol):
    def complete(self, request: CompletionRequest) -> CompletionResponse: ...


def prompt_fingerprint(prompt: str) -> str:
    return hashlib.sha256(prompt.encode()).hexdigest()


# -- scripted backend ---------------------------------------------------------


@dataclass
class Route:
    pattern: str
    response: str | Callable[[CompletionRequest], str]

    def __post_init__(self):
        self._regex = re.compile(self.pattern, re.S)

    def matches(self, prompt: str) -> bool:
        return self._regex.search(prompt) is not None

    def respond(self, request: CompletionRequest) -> str:
        return self.response(request) if callable(self.response) else self.response


class ScriptedBackend:
    """Deterministic stand-in for a hosted model.

    Lookup order: exact prompt fingerprint, then the first matching regex
    route, then ``default``. ``failures`` transient errors are raised before
    the first successful answer, to exercise retry paths.
    """

    def __init__(
        self,
        responses: Mapping[str, str] | None = None,
        routes: Iterable[Route] = (),
        default: str | None = None,
        role: str | None = None,
        failures: int = 0,
        embed_dim: int = 64,
        seed: int = 0,
    ):
        self.responses = dict(responses or {})
        self.routes = list(routes)
        self.default = default
        self.role = role
        self.embed_dim = embed_dim
        self.seed = seed
        self._failures_left = failures
        self._lock = threading.Lock()
        self.calls: list[CompletionRequest] = []

    def add_route(self, pattern: str, response) -> None:
        self.routes.append(Route(pattern, response))

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        with self._lock:
            self.calls.append(request)
            if self._failures_left > 0:
                self._failures_left -= 1
                raise TransientBackendError("scripted transient failure")
        text = self.responses.get(prompt_fingerprint(request.prompt))
        if text is None:
            for route in self.routes:
                if route.matches(request.prompt):
                    text = route.respond(request)
                    break
        if text is None:
            text = self.default
        if text is None:
            raise BackendConfigError(f"no scripted response for prompt {prompt_fingerprint(request.prompt)[:12]}")
        return CompletionResponse(text=text, usage={"prompt_chars": len(request.prompt), "completion_chars": len(text)})

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [hashed_embedding(t, self.embed_dim, self.seed) for t in texts]

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        data = json.loads(Path(path).read_text())
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScriptedBackend":
        return cls(
            responses=data.get("responses", {}),
            routes=[Route(r["pattern"], r["response"]) for r in data.get("routes", ())],
            default=data.get("default"),
            role=data.get("role"),
            embed_dim=int(data.get("embed_dim", 64)),
            seed=int(data.get("seed", 0)),
        )


def hashed_embedding(text: str, dim: int = 64, seed: int = 0) -> np.ndarray:
    """Unit-norm signed feature-hashing embedding of the word tokens of ``text``."""
    vec = np.zeros(dim)
    tokens = re.findall(r"\w+", text.lower())
    for tok in tokens:
        h = int.from_bytes(hashlib.sha256(f"{seed}:{tok}".encode()).digest()[:8], "little")
        vec[h % dim] += 1.0 if (h >> 32) & 1 else -1.0
    if not np.any(vec):
        rng = np.random.default_rng(int.from_bytes(hashlib.sha256(f"{seed}:{text}".encode()).digest()[:8], "little"))
        vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


# -- HTTP backend -------------------------------------------------------------


class HTTPChatBackend:
    """Minimal JSON chat-completion client (OpenAI-compatible request shape)."""

    def __init__(self, endpoint: str, model: str = "default", api_key: str | None = None, timeout: float = 120.0,
                 embedding_model: str | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.embedding_model = embedding_model or model

    def _post(self, path: str, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.endpoint + path, data=json.dumps(payload).encode(), headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode())
        except urllib.error.HTTPError as exc:
            if exc.code == 429 or exc.code >= 500:
                raise TransientBackendError(f"HTTP {exc.code}") from exc
            raise BackendConfigError(f"HTTP {exc.code}: {exc.reason}") from exc
        except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
            raise TransientBackendError(str(exc)) from exc
        except json.JSONDecodeError as exc:
            raise TransientBackendError(f"malformed response body: {exc}") from exc

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        start = time.monotonic()
        payload = {
            "model": request.model if request.model != "default" else self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        }
        data = self._post("/chat/completions", payload)
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise TransientBackendError(f"unexpected response shape: {exc}") from exc
        return CompletionResponse(text=text, usage=data.get("usage", {}), latency=time.monotonic() - start)

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        data = self._post("/embeddings", {"model": self.embedding_model, "input": list(texts)})
        try:
            rows = sorted(data["data"], key=lambda r: r.get("index", 0))
            return [np.asarray(r["embedding"], dtype=float) for r in rows]
        except (KeyError, TypeError) as exc:
            raise TransientBackendError(f"unexpected response shape: {exc}") from exc


# -- throttling ---------------------------------------------------------------


@dataclass(frozen=True)
class ThrottlePolicy:
    max_concurrent: int = 2
    requests_per_minute: float = 5.0
    max_retries: int = 3
    base_delay: float = 1.0
    backoff_factor: float = 2.0
    jitter: float = 0.2

    def __post_init__(self):
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")
        if not self.requests_per_minute > 0:
            raise ValueError("requests_per_minute must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @property
    def window_capacity(self) -> int:
        return max(1, math.floor(self.requests_per_minute))

    @property
    def window_seconds(self) -> float:
        return 60.0 * self.window_capacity / self.requests_per_minute


UNTHROTTLED = ThrottlePolicy(max_concurrent=64, requests_per_minute=1e12, max_retries=3, base_delay=0.0)


def backoff_delay(policy: ThrottlePolicy, attempt: int, rng: random.Random | None = None) -> float:
    """Delay before retry number ``attempt + 1`` (``attempt`` counts from 0).

    Without ``rng`` the delay is exactly ``base_delay * backoff_factor**attempt``;
    with it, the delay is scaled by a uniform factor in ``1 ± jitter``.
    """
    delay = policy.base_delay * policy.backoff_factor ** attempt
    if rng is not None and policy.jitter:
        delay *= 1.0 + rng.uniform(-policy.jitter, policy.jitter)
    return delay


class SystemClock:
    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class SimulatedClock:
    """Manual clock: ``sleep`` advances time instantly."""

    def __init__(self, start: float = 0.0):
        self._t = start
        self._lock = threading.Lock()
        self.sleeps: list[float] = []

    def now(self) -> float:
        with self._lock:
            return self._t

    def sleep(self, seconds: float) -> None:
        with self._lock:
            self.sleeps.append(seconds)
            if seconds > 0:
                self._t += seconds

    def advance(self, seconds: float) -> None:
        self.sleep(seconds)


class RateWindow:
    """Rolling-window request budget: at most ``capacity`` issues per ``window`` seconds."""

    def __init__(self, capacity: int, window: float):
        self.capacity = capacity
        self.window = window
        self._issued: deque[float] = deque()

    def _prune(self, now: float) -> None:
        while self._issued and self._issued[0] + self.window <= now:
            self._issued.popleft()

    def earliest(self, now: float) -> float:
        self._prune(now)
        if len(self._issued) < self.capacity:
            return now
        return self._issued[-self.capacity] + self.window

    def record(self, t: float) -> None:
        self._issued.append(t)


class Throttle:
    def __init__(self, policy: ThrottlePolicy, clock=None):
        self.policy = policy
        self.clock = clock or SystemClock()
        self._slots = threading.BoundedSemaphore(policy.max_concurrent)
        self._window = RateWindow(policy.window_capacity, policy.window_seconds)
        self._lock = threading.Lock()
        self.in_flight = 0
        self.max_in_flight = 0

    @contextmanager
    def slot(self):
        self._slots.acquire()
        try:
            while True:
                with self._lock:
                    now = self.clock.now()
                    start = self._window.earliest(now)
                    if start <= now:
                        self._window.record(now)
                        self.in_flight += 1
                        self.max_in_flight = max(self.max_in_flight, self.in_flight)
                        break
                self.clock.sleep(start - now)
            try:
                yield
            finally:
                with self._lock:
                    self.in_flight -= 1
        finally:
            self._slots.release()


class LLMClient:
    """Throttled, retrying front for a backend.

    Transient errors are retried up to ``policy.max_retries`` times;
    configuration errors propagate immediately.
    """

    def __init__(self, backend, policy: ThrottlePolicy = ThrottlePolicy(), clock=None, rng: random.Random | None = None):
        self.backend = backend
        self.policy = policy
        self.clock = clock or SystemClock()
        self.rng = rng
        self.throttle = Throttle(policy, self.clock)

    def _with_retries(self, fn):
        last: Exception | None = None
        for attempt in range(self.policy.max_retries + 1):
            try:
                with self.throttle.slot():
                    return fn(), attempt
            except TransientBackendError as exc:
                last = exc
                logger.debug("transient backend error on attempt %d: %s", attempt + 1, exc)
                if attempt < self.policy.max_retries:
                    self.clock.sleep(backoff_delay(self.policy, attempt, self.rng))
        raise RetriesExhaustedError(self.policy.max_retries + 1, last)

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        response, retries = self._with_retries(lambda: self.backend.complete(request))
        if not response.text.strip():
            raise EmptyResponseError("backend returned an empty response")
        return replace(response, retry_count=retries)

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        if not texts:
            raise ValueError("nothing to embed")
        vectors, _ = self._with_retries(lambda: self.backend.embed(list(texts)))
        if len(vectors) != len(texts):
            raise BackendError(f"expected {len(texts)} vectors, got {len(vectors)}")
        dims = {len(v) for v in vectors}
        if len(dims) != 1:
            raise BackendError(f"embedding dimension drift within batch: {sorted(dims)}")
        return [np.asarray(v, dtype=float) for v in vectors]


# -- discrete-event dispatch simulation -------------------------------------------


@dataclass(frozen=True)
class SimJob:
    arrival: float
    durations: tuple[float, ...]  # one per attempt; extra attempts reuse the last
    failures: int = 0  # transient failures before success


@dataclass(frozen=True)
class SimAttempt:
    job: int
    attempt: int
    start: float
    end: float
    ok: bool


@dataclass
class SimResult:
    attempts: list[SimAttempt]
    outcomes: dict[int, str]  # job -> "ok" | "exhausted"
    retries: dict[int, int]


def simulate_dispatch(policy: ThrottlePolicy, jobs: Sequence[SimJob]) -> SimResult:
    """Replay ``jobs`` through the throttle and retry rules on a virtual clock.

    Mirrors :class:`Throttle` and :class:`LLMClient` without threads: a job
    takes a concurrency slot in FIFO order, waits on the same
    :class:`RateWindow` while holding it, issues, and on transient failure
    releases the slot and re-queues after :func:`backoff_delay` (no jitter).
    """
    window = RateWindow(policy.window_capacity, policy.window_seconds)
    events: list[tuple[float, int, str, int]] = []
    seq = 0

    def push(t, kind, job):
        nonlocal seq
        heapq.heappush(events, (t, seq, kind, job))
        seq += 1

    for i, job in enumerate(jobs):
        push(job.arrival, "ready", i)

    waiting: deque[int] = deque()
    free_slots = policy.max_concurrent
    attempt_no = {i: 0 for i in range(len(jobs))}
    holding_for_rate: set[int] = set()
    result = SimResult([], {}, {})

    def try_dispatch(now):
        nonlocal free_slots
        while waiting and free_slots > 0:
            i = waiting.popleft()
            free_slots -= 1
            holding_for_rate.add(i)
            push(now, "issue", i)

    while events:
        now, _, kind, i = heapq.heappop(events)
        if kind == "ready":
            waiting.append(i)
        elif kind == "issue":
            start = window.earliest(now)
            if start > now:
                push(start, "issue", i)
                continue
            window.record(now)
            holding_for_rate.discard(i)
            job = jobs[i]
            n = attempt_no[i]
            dur = job.durations[min(n, len(job.durations) - 1)]
            ok = n >= job.failures
            result.attempts.append(SimAttempt(i, n, now, now + dur, ok))
            push(now + dur, "finish_ok" if ok else "finish_fail", i)
        elif kind in ("finish_ok", "finish_fail"):
            free_slots += 1
            n = attempt_no[i]
            if kind == "finish_ok":
                result.outcomes[i] = "ok"
                result.retries[i] = n
            elif n < policy.max_retries:
                attempt_no[i] = n + 1
                push(now + backoff_delay(policy, n), "ready", i)
            else:
                result.outcomes[i] = "exhausted"
                result.retries[i] = n
        try_dispatch(now)
    return result


def load_backend(config: Mapping[str, Any], clock=None):
    """Build a client from a config mapping.

    ``{"kind": "http", "endpoint": ..., "model": ..., "api_key_env": ..., "throttle": {...}}``
    or ``{"kind": "scripted", "fixtures": path-or-dict}``.
    """
    import os

    kind = config.get("kind", "scripted")
    throttle = ThrottlePolicy(**config.get("throttle", {})) if "throttle" in config else None
    if kind == "http":
        key_env = config.get("api_key_env")
        backend = HTTPChatBackend(
            config["endpoint"],
            model=config.get("model", "default"),
            api_key=os.environ.get(key_env) if key_env else None,
            timeout=float(config.get("timeout", 120.0)),
            embedding_model=config.get("embedding_model"),
        )
        return LLMClient(backend, throttle or ThrottlePolicy(), clock=clock, rng=random.Random(config.get("seed", 0)))
    if kind == "scripted":
        fixtures = config.get("fixtures", {})
        backend = ScriptedBackend.from_file(fixtures) if isinstance(fixtures, (str, Path)) else ScriptedBackend.from_dict(fixtures)
        return LLMClient(backend, throttle or UNTHROTTLED, clock=clock)
    raise BackendConfigError(f"unknown backend kind {kind!r}")
