"""Chat-completion HTTP client with retries, plus prompt-template loading.

The client speaks the common chat-completion protocol: POST a JSON body
with model, messages, and temperature 0, read the first choice's message
content.  Endpoint and API key come from the environment unless given
explicitly; requests retry with exponential backoff on transient failures.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar

import httpx

from .errors import BackendError, InputError

ENDPOINT_VAR = "QAPYRAMID_ENDPOINT"
API_KEY_VAR = "QAPYRAMID_API_KEY"
CACHE_DIR_VAR = "QAPYRAMID_CACHE_DIR"

DEFAULT_MAX_IN_FLIGHT = 4

_PROMPT_DIR = Path(__file__).parent / "prompts"

T = TypeVar("T")
R = TypeVar("R")


def load_prompt_template(name: str, prompt_dir: str | Path | None = None) -> str:
    """Read a prompt asset; one trailing newline is stripped."""
    directory = Path(prompt_dir) if prompt_dir else _PROMPT_DIR
    path = directory / f"{name}.txt"
    if not path.exists():
        raise InputError(f"prompt template not found: {path}")
    text = path.read_text(encoding="utf-8")
    return text[:-1] if text.endswith("\n") else text


def render_template(template: str, **substitutions: str) -> str:
    """Substitute {NAME} placeholders; unknown placeholders are left alone."""
    out = template
    for key, value in substitutions.items():
        out = out.replace("{" + key + "}", value)
    return out


def config_from_env(require: Sequence[str] = ()) -> dict[str, str | None]:
    """Collect backend configuration, aggregating every missing variable."""
    values = {
        "endpoint": os.environ.get(ENDPOINT_VAR),
        "api_key": os.environ.get(API_KEY_VAR),
        "cache_dir": os.environ.get(CACHE_DIR_VAR),
    }
    var_names = {"endpoint": ENDPOINT_VAR, "api_key": API_KEY_VAR,
                 "cache_dir": CACHE_DIR_VAR}
    missing = [var_names[k] for k in require if not values.get(k)]
    if missing:
        raise InputError("missing required configuration: " + ", ".join(missing))
    return values


class ChatCompletionClient:
    """Minimal chat-completion caller with bounded retries.

    ``transport`` is exposed so tests can inject ``httpx.MockTransport``;
    the API key is sent as a bearer token and never logged or echoed.
    """

    def __init__(self, endpoint: str, model: str, api_key: str | None = None,
                 timeout: float = 60.0, max_retries: int = 3,
                 backoff: float = 0.5, transport: httpx.BaseTransport | None = None):
        if not endpoint:
            raise InputError("chat-completion endpoint is required")
        self.endpoint = endpoint
        self.model = model
        self._api_key = api_key
        self.max_retries = max_retries
        self.backoff = backoff
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def complete(self, prompt: str) -> str:
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }
        headers = {}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                response = self._client.post(self.endpoint, json=body, headers=headers)
            except httpx.HTTPError as exc:
                last_error = exc
            else:
                if response.status_code >= 500:
                    last_error = BackendError(f"server error {response.status_code}")
                elif response.status_code >= 400:
                    raise BackendError(
                        f"chat-completion request rejected ({response.status_code})")
                else:
                    return self._extract_content(response)
            if attempt < self.max_retries:
                time.sleep(self.backoff * (2 ** attempt))
        raise BackendError(f"chat-completion endpoint unreachable after "
                           f"{self.max_retries + 1} attempts: {last_error}")

    @staticmethod
    def _extract_content(response: httpx.Response) -> str:
        try:
            data = response.json()
            return data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed chat-completion response: {exc}") from exc

    def close(self) -> None:
        self._client.close()


class JsonServiceClient:
    """POST-a-JSON-body, get-a-JSON-body client for remote parser services."""

    def __init__(self, endpoint: str, timeout: float = 60.0, max_retries: int = 3,
                 backoff: float = 0.5, transport: httpx.BaseTransport | None = None):
        if not endpoint:
            raise InputError("service endpoint is required")
        self.endpoint = endpoint
        self.max_retries = max_retries
        self.backoff = backoff
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def call(self, body: dict):
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                response = self._client.post(self.endpoint, json=body)
            except httpx.HTTPError as exc:
                last_error = exc
            else:
                if response.status_code >= 500:
                    last_error = BackendError(f"server error {response.status_code}")
                elif response.status_code >= 400:
                    raise BackendError(f"service request rejected ({response.status_code})")
                else:
                    try:
                        return response.json()
                    except ValueError as exc:
                        raise BackendError(f"service returned non-JSON body: {exc}") from exc
            if attempt < self.max_retries:
                time.sleep(self.backoff * (2 ** attempt))
        raise BackendError(f"service unreachable after {self.max_retries + 1} "
                           f"attempts: {last_error}")


def run_bounded(fn: Callable[[T], R], items: Iterable[T],
                max_in_flight: int = DEFAULT_MAX_IN_FLIGHT) -> list[tuple[T, R | None, Exception | None]]:
    """Apply ``fn`` to every item with bounded parallelism.

    Per-item failures never abort the batch; each result row carries either
    a value or the exception, in input order.
    """
    items = list(items)
    results: list[tuple[T, R | None, Exception | None]] = [None] * len(items)  # type: ignore

    def _one(index: int) -> None:
        try:
            results[index] = (items[index], fn(items[index]), None)
        except Exception as exc:  # noqa: BLE001 - isolation is the contract
            results[index] = (items[index], None, exc)

    if max_in_flight <= 1 or len(items) <= 1:
        for i in range(len(items)):
            _one(i)
    else:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            list(pool.map(_one, range(len(items))))
    return results
