"""Chat endpoint clients: deterministic scripted backends and a remote HTTP client.

Scripted backends make every pipeline testable offline — a reply is a pure
function of the script, the call index, and the prompt. The remote backend
speaks a chat-completions style wire protocol and is the only place in the
package that performs network I/O (embeddings share its HTTP plumbing).
"""

from __future__ import annotations

import json
import os
import threading
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import httpx


class EndpointError(RuntimeError):
    """A chat or embedding endpoint failed to produce a usable reply."""

    def __init__(self, message: str, *, retryable: bool = False):
        super().__init__(message)
        self.retryable = retryable


class ScriptError(RuntimeError):
    """A scripted endpoint ran out of replies — a test-contract violation."""


@dataclass
class ChatResult:
    text: str
    token_logprobs: list[float] | None = None


def render_messages(messages: Sequence[dict[str, str]]) -> str:
    """Flatten a message list to the single prompt string scripts consume."""
    return "\n".join(m.get("content", "") for m in messages)


class ScriptedChat:
    """Chat backend whose replies are canned or computed by a rule.

    ``script`` is either a list of reply strings consumed in call order, or
    a callable ``(prompt, call_index) -> reply`` for rule-based simulation.
    Exhausting a reply list raises :class:`ScriptError` rather than
    recycling, so tests fail loudly when a pipeline makes an unexpected call.
    """

    def __init__(self, script: Sequence[str] | Callable[[str, int], str], name: str = "scripted"):
        self.name = name
        self._script = script
        self._lock = threading.Lock()
        self._calls = 0
        self.prompts: list[str] = []

    @property
    def calls(self) -> int:
        return self._calls

    def chat(self, messages: Sequence[dict[str, str]]) -> ChatResult:
        prompt = render_messages(messages)
        with self._lock:
            index = self._calls
            self._calls += 1
            self.prompts.append(prompt)
            if callable(self._script):
                text = self._script(prompt, index)
            else:
                if index >= len(self._script):
                    raise ScriptError(
                        f"scripted endpoint {self.name!r} exhausted after "
                        f"{len(self._script)} replies (call {index + 1} requested)"
                    )
                text = self._script[index]
        return ChatResult(text=text)


class FailingChat:
    """Endpoint that always fails; used to exercise fallback paths."""

    def __init__(self, message: str = "endpoint unavailable"):
        self.message = message
        self.calls = 0

    def chat(self, messages: Sequence[dict[str, str]]) -> ChatResult:
        self.calls += 1
        raise EndpointError(self.message, retryable=False)


@dataclass
class RetryPolicy:
    """How many times to re-issue a request after a transient failure."""

    retries: int = 2
    timeout: float = 30.0


class RemoteChat:
    """Chat-completions client over HTTP.

    Auth tokens are read from the environment variable named by
    ``auth_env`` — never from config files. Transient transport errors and
    5xx responses are retried per the policy; anything else raises a
    non-retryable :class:`EndpointError`.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        auth_env: str = "MEMCYCLE_API_TOKEN",
        policy: RetryPolicy | None = None,
        want_logprobs: bool = False,
        transport: httpx.BaseTransport | None = None,
    ):
        self.model = model
        self.want_logprobs = want_logprobs
        self.policy = policy or RetryPolicy()
        self.retries_used = 0
        headers = {}
        token = os.environ.get(auth_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(
            base_url=base_url,
            headers=headers,
            timeout=self.policy.timeout,
            transport=transport,
        )

    def chat(self, messages: Sequence[dict[str, str]]) -> ChatResult:
        body = {"model": self.model, "messages": list(messages)}
        if self.want_logprobs:
            body["logprobs"] = True
        data = _post_with_retries(self._client, "/chat/completions", body, self.policy, self)
        try:
            choice = data["choices"][0]
            text = choice["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise EndpointError("malformed chat response", retryable=False) from None
        logprobs = None
        lp = choice.get("logprobs")
        if isinstance(lp, dict) and isinstance(lp.get("content"), list):
            logprobs = [float(tok["logprob"]) for tok in lp["content"]]
        return ChatResult(text=text, token_logprobs=logprobs)


def _post_with_retries(
    client: httpx.Client,
    path: str,
    body: dict,
    policy: RetryPolicy,
    stats: RemoteChat | None = None,
) -> dict:
    attempts = policy.retries + 1
    last_error: Exception | None = None
    for attempt in range(attempts):
        try:
            response = client.post(path, json=body)
        except httpx.TransportError as exc:
            last_error = exc
            if stats is not None and attempt < attempts - 1:
                stats.retries_used += 1
            continue
        if response.status_code >= 500:
            last_error = EndpointError(
                f"server error {response.status_code}", retryable=True
            )
            if stats is not None and attempt < attempts - 1:
                stats.retries_used += 1
            continue
        if response.status_code >= 400:
            raise EndpointError(
                f"request rejected with status {response.status_code}", retryable=False
            )
        try:
            return response.json()
        except json.JSONDecodeError:
            raise EndpointError("response body is not JSON", retryable=False) from None
    raise EndpointError(f"exhausted retries: {last_error}", retryable=True)


def post_json(
    client: httpx.Client, path: str, body: dict, policy: RetryPolicy
) -> dict:
    """Shared retrying POST used by the embedding client."""
    return _post_with_retries(client, path, body, policy, None)
