"""Chat-completion gateway over remote OpenAI-compatible endpoints and scripted fixtures.

The gateway routes every request to a backend, enforces a per-backend cap on
in-flight requests and records token usage in a :class:`UsageLedger` split by
backend and by role category (decision maker vs implementer).
"""

from __future__ import annotations

import logging
import os
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import httpx
import yaml

from .domain import Address, format_address
from .errors import (
    BackendError,
    ConfigurationError,
    FixtureExhaustedError,
    PriceTableError,
    TokenOverflowError,
    TransportError,
)

logger = logging.getLogger(__name__)

DECISION_MAKER = "decision_maker"
IMPLEMENTER = "implementer"
DEFAULT_TEMPERATURE = {DECISION_MAKER: 0.0, IMPLEMENTER: 0.2}
TRANSPORT_RETRIES = 2


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown chat role {self.role!r}")
        if self.role in ("system", "user") and not self.content.strip():
            raise ValueError(f"{self.role} message content must be non-empty")

    def to_wire(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


class Script:
    """Ordered responses keyed by ``role/stage``; optionally ``role/stage@address``.

    Lookups try the address-qualified key first, then the plain stage key, then
    the catch-all key ``*``. Each key keeps its own consumption cursor, so a
    fixture stays valid when prompt wording changes.
    """

    def __init__(self, responses: Mapping[str, list[str]] | list[str]):
        if isinstance(responses, list):
            responses = {"*": responses}
        self._responses = {k: list(v) for k, v in responses.items()}
        self._cursor: dict[str, int] = defaultdict(int)
        self._lock = threading.Lock()

    @classmethod
    def from_yaml(cls, path: str | Path) -> Script:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        flat: dict[str, list[str]] = {}
        for role, stages in data.items():
            if not isinstance(stages, dict):
                raise ConfigurationError(f"{path}: entry for role {role!r} must be a mapping")
            for stage, items in stages.items():
                if isinstance(items, str):
                    items = [items]
                flat[f"{role}/{stage}"] = [str(x) for x in items]
        return cls(flat)

    def keys(self) -> list[str]:
        return sorted(self._responses)

    def next(self, role: str, stage: str, address: Address = ()) -> str:
        candidates = [f"{role}/{stage}@{format_address(address)}", f"{role}/{stage}", "*"]
        with self._lock:
            for key in candidates:
                if key in self._responses:
                    i = self._cursor[key]
                    items = self._responses[key]
                    if i >= len(items):
                        raise FixtureExhaustedError(
                            f"scripted fixture {key!r} exhausted after {len(items)} response(s)")
                    self._cursor[key] = i + 1
                    return items[i]
        raise FixtureExhaustedError(f"no scripted response for {candidates[1]!r} at {format_address(address)}")

    def remaining(self) -> dict[str, int]:
        return {k: len(v) - self._cursor[k] for k, v in self._responses.items()
                if len(v) - self._cursor[k] > 0}


@dataclass(frozen=True)
class BackendRef:
    kind: str
    model_name: str
    endpoint: str | None = None
    credentials: str | None = None
    script: Script | None = field(default=None, compare=False, repr=False)
    max_in_flight: int = 4
    timeout: float = 120.0

    def __post_init__(self):
        if self.kind not in ("remote", "scripted"):
            raise ConfigurationError(f"backend kind must be remote or scripted, got {self.kind!r}")
        if self.kind == "remote":
            if not self.endpoint:
                raise ConfigurationError(f"remote backend {self.model_name!r} needs an endpoint")
            if not self.credentials:
                raise ConfigurationError(
                    f"remote backend {self.model_name!r} must name a credential environment variable")
        elif self.script is None:
            raise ConfigurationError(f"scripted backend {self.model_name!r} needs a script")

    @property
    def key(self) -> str:
        return f"{self.kind}:{self.model_name}"

    @classmethod
    def scripted(cls, script: Script | list[str] | Mapping[str, list[str]], model_name: str = "scripted") -> BackendRef:
        if not isinstance(script, Script):
            script = Script(script)
        return cls(kind="scripted", model_name=model_name, script=script)


@dataclass(frozen=True)
class Limits:
    max_tokens: int = 4096
    temperature: float | None = None


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int
    completion_tokens: int


@dataclass(frozen=True)
class Completion:
    text: str
    usage: Usage


@dataclass
class Tally:
    requests: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def add(self, other: Tally) -> None:
        self.requests += other.requests
        self.prompt_tokens += other.prompt_tokens
        self.completion_tokens += other.completion_tokens

    def as_dict(self) -> dict[str, int]:
        return {"requests": self.requests, "prompt_tokens": self.prompt_tokens,
                "completion_tokens": self.completion_tokens}


class UsageLedger:
    """Token tallies per (role category, backend). Totals are derived, never stored twice."""

    def __init__(self):
        self._cells: dict[tuple[str, str], Tally] = defaultdict(Tally)
        self._models: dict[str, tuple[str, str]] = {}
        self._lock = threading.Lock()

    def record(self, backend: BackendRef, category: str, usage: Usage) -> None:
        with self._lock:
            cell = self._cells[(category, backend.key)]
            cell.requests += 1
            cell.prompt_tokens += usage.prompt_tokens
            cell.completion_tokens += usage.completion_tokens
            self._models[backend.key] = (backend.kind, backend.model_name)

    def by_backend(self) -> dict[str, Tally]:
        out: dict[str, Tally] = defaultdict(Tally)
        for (_, key), t in sorted(self._cells.items()):
            out[key].add(t)
        return dict(out)

    def by_role(self) -> dict[str, Tally]:
        out: dict[str, Tally] = defaultdict(Tally)
        for (cat, _), t in sorted(self._cells.items()):
            out[cat].add(t)
        return dict(out)

    def cells(self) -> dict[tuple[str, str], Tally]:
        return dict(self._cells)

    def backend_info(self, key: str) -> tuple[str, str]:
        return self._models[key]

    def merge(self, other: UsageLedger) -> None:
        with self._lock:
            for k, t in other.cells().items():
                self._cells[k].add(t)
            self._models.update(other._models)

    def total_requests(self) -> int:
        return sum(t.requests for t in self._cells.values())


def ledger_report(ledger: UsageLedger, price_table: Mapping[str, Mapping[str, float]] | None = None) -> dict[str, Any]:
    """Token counts and a monetary estimate per role and per backend.

    ``price_table`` maps a model name to ``{"prompt": p, "completion": c}``,
    prices per 1000 tokens. Scripted backends always cost 0.
    """
    price_table = price_table or {}

    def cost_of(key: str, t: Tally) -> float:
        kind, model = ledger.backend_info(key)
        if kind == "scripted":
            return 0.0
        if model not in price_table:
            raise PriceTableError(f"price table has no entry for model {model!r}")
        p = price_table[model]
        return t.prompt_tokens / 1000 * float(p["prompt"]) + t.completion_tokens / 1000 * float(p["completion"])

    roles: dict[str, dict[str, Any]] = {}
    for (cat, key), t in sorted(ledger.cells().items()):
        entry = roles.setdefault(cat, {**Tally().as_dict(), "cost": 0.0})
        for k, v in t.as_dict().items():
            entry[k] += v
        entry["cost"] += cost_of(key, t)
    backends = {}
    for key, t in ledger.by_backend().items():
        backends[key] = {**t.as_dict(), "cost": cost_of(key, t)}
    total = sum(b["cost"] for b in backends.values())
    return {"roles": roles, "backends": backends, "total_cost": round(total, 10)}


def _word_count(text: str) -> int:
    return len(text.split())


class Gateway:
    """Single entry point for chat completions used by every agent."""

    def __init__(self, *, transport: httpx.BaseTransport | None = None,
                 env: Mapping[str, str] | None = None,
                 sleep: Callable[[float], None] = time.sleep,
                 backoff: float = 0.5):
        self.ledger = UsageLedger()
        self.transcript: list[dict[str, Any]] = []
        self._transport = transport
        self._env = env if env is not None else os.environ
        self._sleep = sleep
        self._backoff = backoff
        self._semaphores: dict[str, threading.BoundedSemaphore] = {}
        self._clients: dict[str, httpx.Client] = {}
        self._lock = threading.Lock()

    def _semaphore(self, backend: BackendRef) -> threading.BoundedSemaphore:
        with self._lock:
            if backend.key not in self._semaphores:
                self._semaphores[backend.key] = threading.BoundedSemaphore(backend.max_in_flight)
            return self._semaphores[backend.key]

    def complete(self, backend: BackendRef, messages: list[ChatMessage], limits: Limits | None = None, *,
                 role: str = "", stage: str = "", address: Address = (),
                 category: str = IMPLEMENTER) -> Completion:
        if not messages or messages[0].role != "system" or any(m.role == "system" for m in messages[1:]):
            raise ValueError("messages must start with exactly one system message")
        limits = limits or Limits()
        temperature = limits.temperature if limits.temperature is not None else DEFAULT_TEMPERATURE[category]
        if backend.kind == "remote":
            key = self._env.get(backend.credentials or "", "")
            if not key:
                raise ConfigurationError(
                    f"credential variable {backend.credentials!r} for {backend.model_name!r} is not set")
        with self._semaphore(backend):
            if backend.kind == "scripted":
                text = backend.script.next(role, stage, address)
                usage = Usage(sum(_word_count(m.content) for m in messages), _word_count(text))
            else:
                text, usage = self._remote(backend, key, messages, limits.max_tokens, temperature)
        self.ledger.record(backend, category, usage)
        with self._lock:
            self.transcript.append({
                "role": role, "stage": stage, "address": list(address), "backend": backend.key,
                "messages": [m.to_wire() for m in messages], "response": text,
            })
        return Completion(text, usage)

    def _client(self, backend: BackendRef) -> httpx.Client:
        with self._lock:
            if backend.key not in self._clients:
                self._clients[backend.key] = httpx.Client(
                    base_url=backend.endpoint.rstrip("/") + "/", transport=self._transport,
                    timeout=backend.timeout)
            return self._clients[backend.key]

    def _remote(self, backend: BackendRef, api_key: str, messages: list[ChatMessage],
                max_tokens: int, temperature: float) -> tuple[str, Usage]:
        body = {
            "model": backend.model_name,
            "messages": [m.to_wire() for m in messages],
            "max_tokens": max_tokens,
            "temperature": temperature,
        }
        headers = {"Authorization": f"Bearer {api_key}"}
        last: Exception | None = None
        for attempt in range(TRANSPORT_RETRIES + 1):
            if attempt:
                self._sleep(self._backoff * 2 ** (attempt - 1))
            try:
                resp = self._client(backend).post("chat/completions", json=body, headers=headers)
            except httpx.TransportError as exc:
                last = TransportError(f"{backend.model_name}: {exc}")
                logger.warning("transport error on attempt %d: %s", attempt + 1, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = TransportError(f"{backend.model_name}: HTTP {resp.status_code}")
                logger.warning("retryable HTTP %d on attempt %d", resp.status_code, attempt + 1)
                continue
            return _parse_response(backend, resp)
        raise last  # type: ignore[misc]

    def close(self) -> None:
        for c in self._clients.values():
            c.close()


def _parse_response(backend: BackendRef, resp: httpx.Response) -> tuple[str, Usage]:
    try:
        data = resp.json()
    except ValueError:
        raise BackendError(f"{backend.model_name}: response is not JSON (HTTP {resp.status_code})") from None
    if resp.status_code >= 400:
        err = data.get("error") or {}
        code = err.get("code") if isinstance(err, dict) else None
        msg = err.get("message", "") if isinstance(err, dict) else str(err)
        if code == "context_length_exceeded" or "maximum context length" in msg:
            raise TokenOverflowError(f"{backend.model_name}: {msg or code}")
        raise BackendError(f"{backend.model_name}: HTTP {resp.status_code}: {msg}")
    try:
        choice = data["choices"][0]
        text = choice["message"]["content"] or ""
        usage = data.get("usage") or {}
        u = Usage(int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0)))
    except (KeyError, IndexError, TypeError) as exc:
        raise BackendError(f"{backend.model_name}: malformed completion payload ({exc})") from None
    if choice.get("finish_reason") == "length":
        raise TokenOverflowError(f"{backend.model_name}: completion truncated at max_tokens")
    return text, u
