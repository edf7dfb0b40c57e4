"""Minimal chat-completion wire client shared by the KB and translation paths.

One client shape: OpenAI-compatible chat-completion JSON over HTTP. Local
model servers are expected to expose the same shape. A "stub:" base_url
selects an offline deterministic backend for tests and dry runs.
"""

from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass
from typing import Callable

from .errors import AuthError, EmptyCompletionError, TransportError


@dataclass
class RetryPolicy:
    max_attempts: int = 3
    backoff_base: float = 1.0

    def delay(self, attempt: int) -> float:
        """Delay before retrying after `attempt` (1-based); non-decreasing."""
        return self.backoff_base * (2 ** (attempt - 1))


@dataclass
class ChatReply:
    text: str
    duration_s: float | None = None  # stubs report a fixed duration


class StubChatBackend:
    """Deterministic offline backend.

    flavor "digest": pseudo-translation derived from a hash of the request.
    flavor "echo": repeats the last line of the prompt.
    """

    def __init__(self, flavor: str = "digest"):
        self.flavor = flavor

    def complete(self, model: str, prompt: str, temperature: float, timeout_s: float) -> ChatReply:
        if self.flavor == "echo":
            return ChatReply(text=prompt.strip().splitlines()[-1], duration_s=0.0)
        blob = f"{model}\n{prompt}\n{temperature!r}".encode("utf-8")
        digest = hashlib.sha256(blob).hexdigest()
        words = [digest[i : i + 4] for i in range(0, 20, 4)]
        return ChatReply(text="tr " + " ".join(words), duration_s=0.0)


class HttpChatBackend:
    """POSTs to <base_url>/chat/completions with a bearer token from the env."""

    def __init__(self, base_url: str, api_key_env: str = "MEDCOD_API_KEY"):
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env

    def complete(self, model: str, prompt: str, temperature: float, timeout_s: float) -> ChatReply:
        import requests

        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        payload = {
            "model": model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
        }
        try:
            response = requests.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers=headers,
                timeout=timeout_s,
            )
        except requests.RequestException as exc:
            raise TransportError(f"request failed: {exc}") from exc
        if response.status_code in (401, 403):
            raise AuthError(f"credential rejected (HTTP {response.status_code})")
        if response.status_code == 429 or response.status_code >= 500:
            raise TransportError(f"HTTP {response.status_code}: {response.text[:200]}")
        if response.status_code != 200:
            raise EmptyCompletionError(f"HTTP {response.status_code}: {response.text[:200]}")
        try:
            text = response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError) as exc:
            raise EmptyCompletionError(f"unexpected response shape: {exc}") from exc
        return ChatReply(text=text or "")


def make_backend(base_url: str, api_key_env: str = "MEDCOD_API_KEY"):
    if base_url.startswith("stub:"):
        return StubChatBackend(flavor=base_url.split(":", 1)[1] or "digest")
    return HttpChatBackend(base_url, api_key_env)


def call_with_retries(
    send: Callable[[], ChatReply],
    policy: RetryPolicy,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[ChatReply, int]:
    """Run `send` under the retry policy; returns (reply, attempts used).

    Only transport-class failures are retried; auth failures and empty
    completions surface immediately.
    """
    last: Exception | None = None
    for attempt in range(1, policy.max_attempts + 1):
        try:
            return send(), attempt
        except TransportError as exc:
            last = exc
            if attempt < policy.max_attempts:
                sleep(policy.delay(attempt))
    raise TransportError(
        f"transport failure after {policy.max_attempts} attempts: {last}"
    ) from last
