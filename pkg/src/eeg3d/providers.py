"""Shared plumbing for external model providers.

Every provider speaks JSON documents, either POSTed over HTTP or piped
through a subprocess's stdin/stdout. Binary payloads travel base64-encoded.
Calls are bounded by a per-provider in-flight limit shared across threads,
and transport failures can be retried with a fixed backoff schedule.
"""

from __future__ import annotations

import json
import subprocess
import threading
import urllib.error
import urllib.request
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence, TypeVar

DEFAULT_IN_FLIGHT = 4
DEFAULT_BACKOFF = (1.0, 2.0, 4.0)

T = TypeVar("T")


class ProviderError(RuntimeError):
    pass


class ProviderTransportError(ProviderError):
    """Retryable failure to reach the provider or read its reply."""


class ProviderTimeout(ProviderTransportError):
    pass


class ProviderRejected(ProviderError):
    """The provider understood the request and refused it; retrying will not help."""


_limits: dict[str, threading.BoundedSemaphore] = {}
_limits_lock = threading.Lock()


@contextmanager
def in_flight_slot(provider) -> Iterator[None]:
    """Hold one of the provider's in-flight slots.

    The semaphore is keyed by ``provider_id``, so every caller of the same
    provider shares one limit (``max_in_flight``, default 4).
    """
    limit = getattr(provider, "max_in_flight", DEFAULT_IN_FLIGHT)
    with _limits_lock:
        sem = _limits.setdefault(provider.provider_id, threading.BoundedSemaphore(limit))
    with sem:
        yield


def call_with_backoff(call: Callable[[], T], provider, backoff: Sequence[float] = DEFAULT_BACKOFF,
                      sleep: Callable[[float], None] | None = None) -> T:
    """Run ``call`` inside an in-flight slot, retrying transport errors.

    One retry per ``backoff`` entry, sleeping that many seconds first (outside
    the slot). The last transport error propagates.
    """
    import time

    sleep = time.sleep if sleep is None else sleep
    for delay in (*backoff, None):
        try:
            with in_flight_slot(provider):
                return call()
        except ProviderTransportError:
            if delay is None:
                raise
        sleep(delay)
    raise AssertionError("unreachable")


def post_json(url: str, doc: dict, *, timeout: float, headers: dict | None = None) -> dict:
    req = urllib.request.Request(url, data=json.dumps(doc).encode("utf-8"), method="POST",
                                 headers={"Content-Type": "application/json", **(headers or {})})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            body = resp.read()
    except urllib.error.HTTPError as exc:
        if 400 <= exc.code < 500 and exc.code not in (408, 429):
            raise ProviderRejected(f"provider rejected the request: HTTP {exc.code}") from None
        raise ProviderTransportError(f"HTTP {exc.code}") from None
    except TimeoutError:
        raise ProviderTimeout(f"no reply within {timeout} s") from None
    except urllib.error.URLError as exc:
        if isinstance(exc.reason, TimeoutError):
            raise ProviderTimeout(f"no reply within {timeout} s") from None
        raise ProviderTransportError(str(exc.reason)) from None
    return parse_reply(body)


def run_json(argv: Sequence[str], doc: dict, *, timeout: float) -> dict:
    try:
        proc = subprocess.run(list(argv), input=json.dumps(doc).encode("utf-8"), capture_output=True,
                              timeout=timeout)
    except subprocess.TimeoutExpired:
        raise ProviderTimeout(f"no reply within {timeout} s") from None
    except OSError as exc:
        raise ProviderTransportError(f"cannot start provider: {exc}") from None
    if proc.returncode != 0:
        err = proc.stderr.decode("utf-8", "replace").strip()
        raise ProviderTransportError(f"provider exited with status {proc.returncode}: {err}")
    return parse_reply(proc.stdout)


def parse_reply(raw: bytes | str) -> dict:
    try:
        doc = json.loads(raw)
    except ValueError as exc:
        raise ProviderTransportError(f"malformed provider reply: {exc}") from None
    if not isinstance(doc, dict):
        raise ProviderTransportError("malformed provider reply: expected a JSON object")
    if "error" in doc:
        raise ProviderRejected(f"provider reported an error: {doc['error']}")
    return doc


def reply_field(doc: dict, name: str, kind: type = str):
    value = doc.get(name)
    if not isinstance(value, kind):
        raise ProviderTransportError(f"malformed provider reply: field {name!r} missing or not {kind.__name__}")
    return value


class JsonEndpoint:
    """Where a provider lives: an HTTP URL or a subprocess command line."""

    def __init__(self, *, url: str | None = None, argv: Sequence[str] | None = None, timeout: float = 120.0,
                 headers: dict | None = None):
        if (url is None) == (argv is None):
            raise ValueError("give exactly one of url or argv")
        self.url = url
        self.argv = list(argv) if argv is not None else None
        self.timeout = timeout
        self.headers = dict(headers or {})

    def request(self, doc: dict) -> dict:
        if self.url is not None:
            return post_json(self.url, doc, timeout=self.timeout, headers=self.headers)
        return run_json(self.argv, doc, timeout=self.timeout)

    def describe(self) -> str:
        return self.url if self.url is not None else " ".join(self.argv)
