"""Shared plumbing for remote embedding and generation providers."""

from __future__ import annotations

import logging
import time
from typing import Callable, TypeVar

import httpx

logger = logging.getLogger(__name__)

T = TypeVar("T")

DEFAULT_ATTEMPTS = 3
DEFAULT_BASE_DELAY = 0.5


class ProviderError(RuntimeError):
    """Base class for provider failures."""


class TransportError(ProviderError):
    """A single provider call failed in a way worth retrying."""


class ProviderUnavailableError(ProviderError):
    """Retries were exhausted."""


class DimensionMismatchError(ProviderError, ValueError):
    """A vector's dimension disagrees with the provider or index contract."""


def call_with_retries(
    fn: Callable[[], T],
    *,
    attempts: int = DEFAULT_ATTEMPTS,
    base_delay: float = DEFAULT_BASE_DELAY,
    sleep: Callable[[float], None] = time.sleep,
    what: str = "provider call",
) -> T:
    """Run ``fn``, retrying ``TransportError`` with exponential backoff.

    Delays are ``base_delay * 2**k`` between attempts. Other exceptions
    propagate immediately.
    """
    last: TransportError | None = None
    for attempt in range(attempts):
        try:
            return fn()
        except TransportError as exc:
            last = exc
            if attempt + 1 < attempts:
                delay = base_delay * (2**attempt)
                logger.warning("%s failed (%s); retry %d/%d in %.2fs", what, exc, attempt + 1, attempts - 1, delay)
                sleep(delay)
    raise ProviderUnavailableError(f"{what} failed after {attempts} attempts: {last}") from last


def post_json(client: httpx.Client, url: str, payload: dict, headers: dict[str, str] | None = None) -> dict:
    """POST JSON and return the decoded body; any non-200 status is a transport failure."""
    try:
        response = client.post(url, json=payload, headers=headers)
    except httpx.HTTPError as exc:
        raise TransportError(f"POST {url}: {exc}") from exc
    if response.status_code != 200:
        raise TransportError(f"POST {url}: HTTP {response.status_code}")
    try:
        body = response.json()
    except ValueError as exc:
        raise TransportError(f"POST {url}: response is not JSON") from exc
    if not isinstance(body, dict):
        raise TransportError(f"POST {url}: expected a JSON object")
    return body


def auth_headers(api_key: str | None) -> dict[str, str]:
    return {"Authorization": f"Bearer {api_key}"} if api_key else {}
