"""Uniform model access: one request/response shape for every role a model
plays (injector, detector, model under test, captioner), with an HTTP
backend, a deterministic scripted backend for tests, a content-addressed
response cache, and retry with exponential backoff.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import requests

logger = logging.getLogger(__name__)


class Purpose(str, Enum):
    INJECT = "inject"
    DETECT = "detect"
    EVALUATE = "evaluate"
    CAPTION = "caption"


@dataclass(frozen=True)
class Sampling:
    temperature: float = 0.0
    max_tokens: int = 4096


@dataclass(frozen=True)
class ImageAttachment:
    data: bytes
    media_type: str = "image/png"


@dataclass(frozen=True)
class ModelRequest:
    model: str
    system: str
    user: str
    purpose: str
    image: ImageAttachment | None = None
    sampling: Sampling = Sampling()


@dataclass(frozen=True)
class ModelResponse:
    text: str
    backend_id: str
    latency: float
    cache_hit: bool
    attempts: int


class BackendError(Exception):
    pass


class RetryableBackendError(BackendError):
    pass


class ScriptExhaustedError(BackendError):
    pass


def cache_key(req: ModelRequest) -> str:
    """Hex digest identifying a request by content.

    Image bytes enter via their own digest so keys stay fixed-size; any field
    that can change the response participates.
    """
    image = None
    if req.image is not None:
        image = {
            "media_type": req.image.media_type,
            "sha256": hashlib.sha256(req.image.data).hexdigest(),
        }
    payload = {
        "model": req.model,
        "system": req.system,
        "user": req.user,
        "image": image,
        "sampling": {
            "temperature": req.sampling.temperature,
            "max_tokens": req.sampling.max_tokens,
        },
        "purpose": req.purpose,
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ResponseCache:
    """One file per response under a directory, named by request digest.

    Writes go through a temp file and an atomic rename, so a reader never
    sees a partial entry.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> str | None:
        path = self._path(key)
        try:
            with open(path, encoding="utf-8") as f:
                return json.load(f)["text"]
        except FileNotFoundError:
            return None
        except (json.JSONDecodeError, KeyError):
            logger.warning("dropping unreadable cache entry %s", path)
            return None

    def put(self, key: str, text: str) -> None:
        path = self._path(key)
        tmp = path.with_suffix(f".tmp.{os.getpid()}")
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump({"text": text}, f, ensure_ascii=False)
        os.replace(tmp, path)


@dataclass
class ScriptRule:
    """Matches requests by purpose and an optional substring of the user text.

    A responder callable answers every matching request; a response list is
    consumed one element per match and the rule stops matching when empty.
    """

    purpose: str
    contains: str | None = None
    responses: list[str] = field(default_factory=list)
    responder: Callable[[ModelRequest], str] | None = None

    def matches(self, req: ModelRequest) -> bool:
        if req.purpose != self.purpose:
            return False
        if self.contains is not None and self.contains not in req.user:
            return False
        return self.responder is not None or bool(self.responses)


class ScriptedBackend:
    """Deterministic in-process backend: first matching rule answers."""

    id = "scripted"

    def __init__(self, rules: list[ScriptRule]):
        self.rules = list(rules)
        self.requests: list[ModelRequest] = []

    def send(self, req: ModelRequest) -> str:
        self.requests.append(req)
        for rule in self.rules:
            if rule.matches(req):
                if rule.responder is not None:
                    return rule.responder(req)
                return rule.responses.pop(0)
        raise ScriptExhaustedError(
            f"scripted backend has no response for a {req.purpose!r} request"
        )


class HttpBackend:
    """Chat-style JSON-over-HTTP backend.

    Sends {model, messages, temperature, max_tokens}; message content is a
    list of {"type":"text"|"image"} parts, images base64-encoded. Expects a
    JSON body with a top-level "text" field. The bearer token is read from
    the environment variable named at construction.
    """

    def __init__(
        self,
        base_url: str,
        api_key_env: str = "CAPLOC_API_KEY",
        timeout: float = 120.0,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.session = session or requests.Session()
        self.id = f"http:{self.base_url}"

    def send(self, req: ModelRequest) -> str:
        headers = {}
        token = os.environ.get(self.api_key_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        user_content: list[dict] = [{"type": "text", "text": req.user}]
        if req.image is not None:
            user_content.append(
                {
                    "type": "image",
                    "media_type": req.image.media_type,
                    "data": base64.b64encode(req.image.data).decode("ascii"),
                }
            )
        body = {
            "model": req.model,
            "messages": [
                {"role": "system", "content": [{"type": "text", "text": req.system}]},
                {"role": "user", "content": user_content},
            ],
            "temperature": req.sampling.temperature,
            "max_tokens": req.sampling.max_tokens,
        }
        try:
            resp = self.session.post(
                self.base_url, json=body, headers=headers, timeout=self.timeout
            )
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise RetryableBackendError(f"transport failure: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise RetryableBackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["text"]
        except (ValueError, KeyError) as exc:
            raise BackendError(f"malformed backend response: {exc}") from exc


@dataclass
class RetryPolicy:
    attempts: int = 3
    base_delay: float = 0.5
    max_delay: float = 8.0

    def delay(self, attempt: int) -> float:
        return min(self.base_delay * (2 ** (attempt - 1)), self.max_delay)


class _InFlight:
    def __init__(self) -> None:
        self.done = threading.Event()
        self.response: ModelResponse | None = None
        self.error: BaseException | None = None


class ModelGate:
    """Front door for model calls: cache lookup, in-flight de-duplication,
    retry loop, cache write-back."""

    def __init__(
        self,
        backend,
        cache: ResponseCache | None = None,
        retry: RetryPolicy | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.backend = backend
        self.cache = cache
        self.retry = retry or RetryPolicy()
        self._sleep = sleep
        self._lock = threading.Lock()
        self._inflight: dict[str, _InFlight] = {}

    def complete(self, req: ModelRequest) -> ModelResponse:
        key = cache_key(req)
        if self.cache is not None:
            cached = self.cache.get(key)
            if cached is not None:
                return ModelResponse(
                    text=cached,
                    backend_id=self.backend.id,
                    latency=0.0,
                    cache_hit=True,
                    attempts=0,
                )
        with self._lock:
            flight = self._inflight.get(key)
            owner = flight is None
            if owner:
                flight = _InFlight()
                self._inflight[key] = flight
        if not owner:
            flight.done.wait()
            if flight.error is not None:
                raise flight.error
            assert flight.response is not None
            return ModelResponse(
                text=flight.response.text,
                backend_id=flight.response.backend_id,
                latency=0.0,
                cache_hit=True,
                attempts=0,
            )
        try:
            response = self._call(req)
            if self.cache is not None:
                self.cache.put(key, response.text)
            flight.response = response
            return response
        except BaseException as exc:
            flight.error = exc
            raise
        finally:
            with self._lock:
                self._inflight.pop(key, None)
            flight.done.set()

    def _call(self, req: ModelRequest) -> ModelResponse:
        last: BaseException | None = None
        for attempt in range(1, self.retry.attempts + 1):
            start = time.perf_counter()
            try:
                text = self.backend.send(req)
                return ModelResponse(
                    text=text,
                    backend_id=self.backend.id,
                    latency=time.perf_counter() - start,
                    cache_hit=False,
                    attempts=attempt,
                )
            except RetryableBackendError as exc:
                last = exc
                if attempt < self.retry.attempts:
                    wait = self.retry.delay(attempt)
                    logger.warning(
                        "retryable failure (attempt %d/%d), backing off %.1fs: %s",
                        attempt,
                        self.retry.attempts,
                        wait,
                        exc,
                    )
                    self._sleep(wait)
        raise BackendError(
            f"backend failed after {self.retry.attempts} attempts: {last}"
        ) from last
