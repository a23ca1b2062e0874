"""Text generation and embedding behind one interface.

Two interchangeable generation backends: an HTTP backend speaking the
OpenAI-compatible chat-completions shape to a locally served model, and a
scripted backend that replays canned completions for tests and fixtures.
The gateway applies stop-sequence truncation and embedding normalization
itself, so behavior does not depend on which backend is wired in.

Patient text never leaves the process unless the HTTP backend is
configured, and then only to hosts on an explicit allow-list.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence
from urllib.parse import urlparse

from .errors import ConfigurationError
from .prompts import PromptBundle


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.1
    top_p: float = 0.7
    top_k: int = 50
    max_new_tokens: int = 1024
    stop_sequences: tuple[str, ...] = ()

    def merged_stops(self, extra: Sequence[str]) -> "GenerationParams":
        stops = tuple(dict.fromkeys((*self.stop_sequences, *extra)))
        return replace(self, stop_sequences=stops)


class GatewayError(RuntimeError):
    def __init__(self, message: str, attempts: int = 1):
        self.attempts = attempts
        super().__init__(message)


class ScriptMissError(GatewayError):
    def __init__(self, digest: str, prompt_head: str):
        self.digest = digest
        self.prompt_head = prompt_head
        super().__init__(
            f"no scripted reply for prompt digest {digest}; prompt starts: {prompt_head!r}"
        )


class EmbeddingError(ValueError):
    pass


def truncate_at_stop(text: str, stops: Sequence[str]) -> str:
    cut = len(text)
    for stop in stops:
        if not stop:
            continue
        idx = text.find(stop)
        if idx != -1:
            cut = min(cut, idx)
    return text[:cut]


def l2_normalize(values: Sequence[float]) -> list[float]:
    norm = math.sqrt(sum(v * v for v in values))
    if norm == 0.0:
        # degenerate input still needs a valid unit vector so similarity
        # stays defined; pin it to the first axis
        out = [0.0] * len(values)
        if out:
            out[0] = 1.0
        return out
    return [v / norm for v in values]


class GenerationBackend(Protocol):
    def complete(self, bundle: PromptBundle, params: GenerationParams) -> str: ...


class Embedder(Protocol):
    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


class ScriptedBackend:
    """Deterministic replay backend.

    Three matching modes:
      sequence - replies consumed in order; exhaustion is an error
      keyed    - replies addressed by the prompt bundle digest
      rules    - first rule whose substrings all occur in the prompt wins
    """

    def __init__(
        self,
        mode: str,
        replies: Sequence[str] = (),
        keyed: dict[str, str] | None = None,
        rules: Sequence[tuple[tuple[str, ...], str]] = (),
        default: str | None = None,
    ):
        if mode not in ("sequence", "keyed", "rules"):
            raise ConfigurationError(f"unknown script mode: {mode!r}")
        self.mode = mode
        self._replies = list(replies)
        self._keyed = dict(keyed or {})
        self._rules = [(tuple(needles), reply) for needles, reply in rules]
        self._default = default
        self._cursor = 0
        self._lock = threading.Lock()

    @classmethod
    def sequence(cls, replies: Sequence[str]) -> "ScriptedBackend":
        return cls("sequence", replies=replies)

    @classmethod
    def from_digests(cls, keyed: dict[str, str]) -> "ScriptedBackend":
        return cls("keyed", keyed=keyed)

    @classmethod
    def from_rules(
        cls, rules: Sequence[tuple[Sequence[str], str]], default: str | None = None
    ) -> "ScriptedBackend":
        return cls(
            "rules",
            rules=[(tuple(needles), reply) for needles, reply in rules],
            default=default,
        )

    def complete(self, bundle: PromptBundle, params: GenerationParams) -> str:
        with self._lock:
            if self.mode == "sequence":
                if self._cursor >= len(self._replies):
                    raise GatewayError(
                        f"script exhausted after {len(self._replies)} replies"
                    )
                reply = self._replies[self._cursor]
                self._cursor += 1
                return reply
            if self.mode == "keyed":
                reply = self._keyed.get(bundle.digest)
                if reply is None:
                    raise ScriptMissError(bundle.digest, bundle.text[:80])
                return reply
            for needles, reply in self._rules:
                if all(needle in bundle.text for needle in needles):
                    return reply
            if self._default is not None:
                return self._default
            raise ScriptMissError(bundle.digest, bundle.text[:80])


def scripted_backend_from_file(path: str | Path) -> ScriptedBackend:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read script file {path}: {exc}") from exc
    mode = obj.get("mode")
    if mode == "sequence":
        return ScriptedBackend.sequence([str(r) for r in obj.get("replies", [])])
    if mode == "keyed":
        replies = obj.get("replies", {})
        if not isinstance(replies, dict):
            raise ConfigurationError("keyed script needs a digest->reply object under 'replies'")
        return ScriptedBackend.from_digests({str(k): str(v) for k, v in replies.items()})
    if mode == "rules":
        rules = [
            (tuple(str(n) for n in rule.get("contains", [])), str(rule.get("reply", "")))
            for rule in obj.get("rules", [])
        ]
        default = obj.get("default")
        return ScriptedBackend.from_rules(rules, default=None if default is None else str(default))
    raise ConfigurationError(f"script file {path} has unknown mode {mode!r}")


class RecordingBackend:
    """Wrap a live backend and capture a keyed script of what it said.

    The saved file replays through ScriptedBackend to an identical
    trajectory, which is how replay determinism is exercised without a
    served model.
    """

    def __init__(self, inner: GenerationBackend):
        self.inner = inner
        self.recorded: dict[str, str] = {}
        self._lock = threading.Lock()

    def complete(self, bundle: PromptBundle, params: GenerationParams) -> str:
        reply = self.inner.complete(bundle, params)
        with self._lock:
            self.recorded[bundle.digest] = reply
        return reply

    def save(self, path: str | Path) -> None:
        payload = {"mode": "keyed", "replies": dict(sorted(self.recorded.items()))}
        Path(path).write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


DEFAULT_ALLOWED_HOSTS = ("localhost", "127.0.0.1", "::1")


def _check_host(base_url: str, allowed_hosts: Sequence[str] | None) -> None:
    if allowed_hosts is None:
        return
    host = urlparse(base_url).hostname or ""
    if host not in allowed_hosts:
        raise ConfigurationError(
            f"backend host {host!r} is not on the allow-list {tuple(allowed_hosts)}"
        )


class HttpBackend:
    """Chat-completions client for a locally served model.

    The open assistant turn ("Thought:" plus scratchpad) is sent as a
    partial final message for the server to continue, which is how
    OpenAI-compatible local servers expose raw-completion behavior.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        allowed_hosts: Sequence[str] | None = DEFAULT_ALLOWED_HOSTS,
        retries: int = 3,
        timeout: float = 120.0,
        api_key: str | None = None,
        client=None,
    ):
        _check_host(base_url, allowed_hosts)
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.retries = retries
        self.timeout = timeout
        self.api_key = api_key
        self._client = client

    def _assistant_prefix(self, bundle: PromptBundle) -> str:
        tail = bundle.text.rsplit("\n", 1)[-1]
        return tail if tail else "Thought:"

    def complete(self, bundle: PromptBundle, params: GenerationParams) -> str:
        import httpx

        messages = [{"role": "system", "content": bundle.system_text}]
        if bundle.user_text:
            messages.append({"role": "user", "content": bundle.user_text})
        messages.append({"role": "assistant", "content": self._assistant_prefix(bundle)})
        payload = {
            "model": self.model,
            "messages": messages,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "top_k": params.top_k,
            "max_tokens": params.max_new_tokens,
            "stop": list(params.stop_sequences),
            "add_generation_prompt": False,
            "continue_final_message": True,
        }
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        client = self._client or httpx.Client(timeout=self.timeout)
        owns_client = self._client is None
        last_error: Exception | None = None
        try:
            for attempt in range(1, self.retries + 1):
                try:
                    response = client.post(
                        f"{self.base_url}/chat/completions", json=payload, headers=headers
                    )
                    if response.status_code >= 500:
                        raise httpx.HTTPStatusError(
                            f"server error {response.status_code}",
                            request=response.request,
                            response=response,
                        )
                    response.raise_for_status()
                    body = response.json()
                    return body["choices"][0]["message"]["content"]
                except (httpx.TransportError, httpx.HTTPStatusError, KeyError, ValueError) as exc:
                    last_error = exc
                    if attempt < self.retries:
                        time.sleep(0.2 * attempt)
            raise GatewayError(
                f"backend failed after {self.retries} attempts: {last_error}",
                attempts=self.retries,
            )
        finally:
            if owns_client:
                client.close()


_TOKEN_RE = re.compile(r"[a-z0-9]+")


class HashingEmbedder:
    """Deterministic bag-of-words embedding via token hashing.

    Each token is hashed into one of `dim` signed buckets, so texts
    sharing vocabulary land near each other under cosine similarity. A
    stand-in for a served sentence encoder with the same interface.
    """

    def __init__(self, dim: int = 256):
        if dim < 2:
            raise ConfigurationError("embedding dimension must be at least 2")
        self.dim = dim

    def _embed_one(self, text: str) -> list[float]:
        vec = [0.0] * self.dim
        for token in _TOKEN_RE.findall(text.lower()):
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            bucket = int.from_bytes(digest[:4], "little") % self.dim
            sign = 1.0 if digest[4] & 1 else -1.0
            vec[bucket] += sign
        return vec

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        return [self._embed_one(t) for t in texts]


class ScriptedEmbedder:
    def __init__(self, mapping: dict[str, Sequence[float]], dim: int | None = None):
        self.mapping = {k: list(v) for k, v in mapping.items()}
        dims = {len(v) for v in self.mapping.values()}
        if dim is None and len(dims) > 1:
            raise EmbeddingError(f"scripted embedder has mixed dimensions: {sorted(dims)}")
        self.dim = dim if dim is not None else (dims.pop() if dims else 2)

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        out = []
        for text in texts:
            if text not in self.mapping:
                raise EmbeddingError(f"no scripted embedding for text starting {text[:60]!r}")
            out.append(list(self.mapping[text]))
        return out


class HttpEmbedder:
    def __init__(
        self,
        base_url: str,
        model: str,
        allowed_hosts: Sequence[str] | None = DEFAULT_ALLOWED_HOSTS,
        retries: int = 3,
        timeout: float = 60.0,
        api_key: str | None = None,
        client=None,
    ):
        _check_host(base_url, allowed_hosts)
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.retries = retries
        self.timeout = timeout
        self.api_key = api_key
        self._client = client

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        import httpx

        payload = {"model": self.model, "input": list(texts)}
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        client = self._client or httpx.Client(timeout=self.timeout)
        owns_client = self._client is None
        last_error: Exception | None = None
        try:
            for attempt in range(1, self.retries + 1):
                try:
                    response = client.post(
                        f"{self.base_url}/embeddings", json=payload, headers=headers
                    )
                    response.raise_for_status()
                    body = response.json()
                    rows = sorted(body["data"], key=lambda row: row["index"])
                    return [[float(v) for v in row["embedding"]] for row in rows]
                except (httpx.TransportError, httpx.HTTPStatusError, KeyError, ValueError) as exc:
                    last_error = exc
                    if attempt < self.retries:
                        time.sleep(0.2 * attempt)
            raise GatewayError(
                f"embedding backend failed after {self.retries} attempts: {last_error}",
                attempts=self.retries,
            )
        finally:
            if owns_client:
                client.close()


@dataclass
class Gateway:
    """Single entry point the engine uses for all model calls.

    Stop truncation and embedding normalization happen here so scripted
    and HTTP backends are behaviorally interchangeable.
    """

    backend: GenerationBackend
    embedder: Embedder
    params: GenerationParams = field(default_factory=GenerationParams)

    def generate(
        self,
        bundle: PromptBundle,
        params: GenerationParams | None = None,
        audit: list | None = None,
    ) -> str:
        effective = (params or self.params).merged_stops(bundle.stop_sequences)
        reply = self.backend.complete(bundle, effective)
        out = truncate_at_stop(reply, effective.stop_sequences)
        if audit is not None:
            audit.append(
                {
                    "event": "generation",
                    "digest": bundle.digest,
                    "params": {
                        "temperature": effective.temperature,
                        "top_p": effective.top_p,
                        "top_k": effective.top_k,
                        "max_new_tokens": effective.max_new_tokens,
                        "stop_sequences": list(effective.stop_sequences),
                    },
                    "response": out,
                }
            )
        return out

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        if not texts:
            raise EmbeddingError("embed called with no texts")
        vectors = self.embedder.embed(texts)
        dims = {len(v) for v in vectors}
        if len(dims) != 1:
            raise EmbeddingError(f"mixed embedding dimensions in batch: {sorted(dims)}")
        return [l2_normalize(v) for v in vectors]
