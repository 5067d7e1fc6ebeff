"""Object-centric description of a decoded image by a multimodal text model.

The template asset ships with the package and its SHA-256 is pinned here, so
an edited asset fails loudly instead of silently changing every prompt.
Providers are plain objects with a ``provider_id`` and a
``generate(request) -> str`` method: HTTP and subprocess adapters speak a JSON
wire format, and deterministic mocks cover tests.
"""

from __future__ import annotations

import base64
import hashlib
import json
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Callable, Protocol, Sequence

import numpy as np

from .cache import (
    CacheError,
    StageCache,
    cache_key,
    canonical_json,
    config_hash,
    image_digest,
    pack_image,
    sha256_hex,
    trial_digest,
    unpack_image,
)
from .dataset import EegTrial, StimulusImage
from .pixmap import NAMED_COLORS, decode_ppm, encode_ppm
from .providers import (
    DEFAULT_BACKOFF,
    DEFAULT_IN_FLIGHT,
    JsonEndpoint,
    call_with_backoff,
    reply_field,
)

TEMPLATE_VERSION = "v1"
TEMPLATE_SHA256 = {"v1": "a38f2892b34c9611fa39163f920e55b888545f95f5f53aedf3ed617bb3da5f8e"}
_SECTION = re.compile(r"\A\[system\]\n(.*)\n\[user\]\n(.*)\n\Z", re.S)

MAX_DESCRIPTION_CHARS = 4096
PREAMBLES = ("here is", "sure")
BULLETS = ("-", "*", "•")
PPM_MIME = "image/x-portable-pixmap"


class ReasoningError(RuntimeError):
    pass


class TemplateError(ReasoningError):
    pass


class ValidationFailed(ReasoningError):
    def __init__(self, problems: Sequence[str], raw: str, attempts: int):
        self.problems = tuple(problems)
        self.raw = raw
        self.attempts = attempts
        super().__init__(f"description rejected after {attempts} attempts ({'; '.join(problems)}); "
                         f"last output: {raw!r}")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


# -- template ------------------------------------------------------------------

@dataclass(frozen=True)
class PromptTemplate:
    system_text: str
    user_text: str
    version: str = TEMPLATE_VERSION

    def __post_init__(self):
        if not self.system_text or not self.user_text:
            raise TemplateError("system and user texts must be non-empty")

    def to_bytes(self) -> bytes:
        return f"[system]\n{self.system_text}\n[user]\n{self.user_text}\n".encode("utf-8")

    @classmethod
    def from_bytes(cls, data: bytes, version: str) -> "PromptTemplate":
        m = _SECTION.match(data.decode("utf-8"))
        if m is None:
            raise TemplateError("template must hold a [system] section followed by a [user] section")
        return cls(m.group(1), m.group(2), version)

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def load_template(version: str = TEMPLATE_VERSION, *, verify: bool = True) -> PromptTemplate:
    """Load a packaged template; ``verify`` checks its pinned content hash."""
    try:
        data = resources.files("eeg3d").joinpath("assets", f"prompt_template_{version}.txt").read_bytes()
    except FileNotFoundError:
        raise TemplateError(f"no packaged template for version {version!r}") from None
    if verify:
        digest = hashlib.sha256(data).hexdigest()
        if digest != TEMPLATE_SHA256.get(version):
            raise TemplateError(f"template {version} content hash {digest} does not match the pinned value")
    return PromptTemplate.from_bytes(data, version)


# -- descriptions and validation -----------------------------------------------

@dataclass(frozen=True)
class SemanticDescription:
    text: str
    source_image_id: str
    provider_id: str
    attempt: int

    def __post_init__(self):
        problems = validate_text(self.text)
        if problems:
            raise ReasoningError(f"invalid description: {'; '.join(problems)}")


def validate_text(text: str) -> list[str]:
    """Return every rule ``text`` breaks (empty list when it is acceptable).

    Callers strip surrounding whitespace first; the rules themselves are pure.
    """
    problems = []
    if not text.strip():
        return ["empty"]
    if text != text.strip():
        problems.append("surrounding whitespace")
    if "\n" in text or "\r" in text:
        problems.append("more than one line")
    if any(line.lstrip().startswith(BULLETS) for line in text.splitlines()):
        problems.append("bullet marker at line start")
    if "```" in text:
        problems.append("markdown fence")
    if len(text) > MAX_DESCRIPTION_CHARS:
        problems.append(f"longer than {MAX_DESCRIPTION_CHARS} characters")
    if text.lower().startswith(PREAMBLES):
        problems.append("conversational preamble")
    return problems


# -- provider contract ---------------------------------------------------------

@dataclass(frozen=True)
class ReasonRequest:
    system: str
    user: str
    image_id: str
    image_ppm: bytes
    params: dict = field(default_factory=dict)

    def to_wire(self) -> dict:
        return {
            "system": self.system,
            "user": self.user,
            "image_id": self.image_id,
            "image": {"mime": PPM_MIME, "data": base64.b64encode(self.image_ppm).decode("ascii")},
            "params": self.params,
        }


class ReasonerProvider(Protocol):
    provider_id: str

    def generate(self, request: ReasonRequest) -> str:
        ...


class RemoteReasoner:
    """Provider reached through a JSON endpoint; the reply is ``{"text": ...}``."""

    def __init__(self, endpoint: JsonEndpoint, provider_id: str, *, params: dict | None = None,
                 max_in_flight: int = DEFAULT_IN_FLIGHT):
        self.endpoint = endpoint
        self.provider_id = provider_id
        self.params = dict(params or {})
        self.max_in_flight = max_in_flight

    def generate(self, request: ReasonRequest) -> str:
        wire = request.to_wire()
        wire["params"] = {**self.params, **wire["params"]}
        return reply_field(self.endpoint.request(wire), "text")


class HttpReasoner(RemoteReasoner):
    def __init__(self, url: str, provider_id: str = "http", *, timeout: float = 120.0, headers: dict | None = None,
                 **kwargs):
        super().__init__(JsonEndpoint(url=url, timeout=timeout, headers=headers), provider_id, **kwargs)


class SubprocessReasoner(RemoteReasoner):
    def __init__(self, argv: Sequence[str], provider_id: str = "subprocess", *, timeout: float = 120.0, **kwargs):
        super().__init__(JsonEndpoint(argv=argv, timeout=timeout), provider_id, **kwargs)


# -- reasoning with retries ----------------------------------------------------

@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 3
    backoff: tuple[float, ...] = DEFAULT_BACKOFF

    def __post_init__(self):
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")


def build_request(image: StimulusImage, template: PromptTemplate) -> ReasonRequest:
    return ReasonRequest(template.system_text, template.user_text, image.image_id, encode_ppm(image.pixels))


def reason(image: StimulusImage, template: PromptTemplate, provider, *, policy: RetryPolicy = RetryPolicy(),
           sleep: Callable[[float], None] = time.sleep) -> SemanticDescription:
    """Ask ``provider`` for a description of ``image`` and validate it.

    Transport errors back off (1 s, 2 s, 4 s by default) before giving up.
    Invalid outputs are retried immediately with the same request, up to
    ``policy.max_retries`` attempts in total.
    """
    request = build_request(image, template)
    problems, raw = [], ""
    for attempt in range(1, policy.max_retries + 1):
        raw = call_with_backoff(lambda: provider.generate(request), provider, policy.backoff, sleep)
        text = raw.strip()
        problems = validate_text(text)
        if not problems:
            return SemanticDescription(text, image.image_id, provider.provider_id, attempt)
    raise ValidationFailed(problems, raw, policy.max_retries)


class Reasoner:
    """``reason`` bound to a template, provider and policy, with a cache fingerprint."""

    def __init__(self, provider, template: PromptTemplate | None = None, policy: RetryPolicy = RetryPolicy(),
                 sleep: Callable[[float], None] = time.sleep):
        self.provider = provider
        self.template = template or load_template()
        self.policy = policy
        self.sleep = sleep

    @property
    def fingerprint(self) -> str:
        return config_hash({"template": self.template.sha256, "provider": self.provider.provider_id,
                            "max_retries": self.policy.max_retries})

    def __call__(self, image: StimulusImage) -> SemanticDescription:
        return reason(image, self.template, self.provider, policy=self.policy, sleep=self.sleep)


def pack_description(desc: SemanticDescription) -> bytes:
    return canonical_json(asdict(desc))


def unpack_description(data: bytes) -> SemanticDescription:
    return SemanticDescription(**json.loads(data))


def compose_pipeline_description(trial: EegTrial, decode: Callable[[EegTrial], StimulusImage],
                                 reason: Callable[[StimulusImage], SemanticDescription], *,
                                 cache: StageCache | None = None, mode: str = "full",
                                 seed: int = 0) -> SemanticDescription:
    """Description of the image decoded from ``trial``: ``reason(decode(trial))``.

    With a cache, both stages need a ``fingerprint`` attribute; each
    intermediate is stored and reused, so an unchanged rerun makes no
    provider calls. Failures are re-raised as ``StageError`` naming the stage.
    """
    image = run_stage("decode", decode, trial, {"trial": trial_digest(trial)}, pack_image, unpack_image,
                      cache, mode, seed)
    return run_stage("reason", reason, image, {"image": image_digest(image)}, pack_description,
                     unpack_description, cache, mode, seed)


def run_stage(stage, fn, arg, inputs, pack, unpack, cache, mode, seed):
    """``fn(arg)``, memoized under the stage's cache key when a cache is given.

    The key covers the input hashes, ``fn.fingerprint``, mode and seed. Any
    failure surfaces as ``StageError`` naming ``stage``.
    """
    try:
        if cache is None:
            return fn(arg)
        fingerprint = getattr(fn, "fingerprint", None)
        if not fingerprint:
            raise CacheError(f"{stage} stage has no fingerprint; it cannot be cached")
        key = cache_key(stage, inputs, fingerprint, mode=mode, seed=seed)
        provider = getattr(fn, "provider_id", None) or getattr(getattr(fn, "provider", None), "provider_id", "")
        return unpack(cache.memo(stage, key, lambda: pack(fn(arg)), input_hash=sha256_hex(canonical_json(inputs)),
                                 config_hash=fingerprint, provider_id=provider))
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, exc) from exc


# -- deterministic mock providers ----------------------------------------------

class MockReasoner:
    """Base for test doubles: counts calls thread-safely."""

    max_in_flight = DEFAULT_IN_FLIGHT

    def __init__(self, provider_id: str):
        self.provider_id = provider_id
        self.calls = 0
        self.requests: list[ReasonRequest] = []
        self._lock = threading.Lock()

    def generate(self, request: ReasonRequest) -> str:
        with self._lock:
            self.calls += 1
            n = self.calls
            self.requests.append(request)
        return self.respond(request, n)

    def respond(self, request: ReasonRequest, call: int) -> str:
        raise NotImplementedError


class FixedReasoner(MockReasoner):
    def __init__(self, text: str, provider_id: str = "mock-fixed"):
        super().__init__(provider_id)
        self.text = text

    def respond(self, request, call):
        return self.text


class EchoReasoner(MockReasoner):
    """Embeds the request's image id in a fixed sentence."""

    def __init__(self, provider_id: str = "mock-echo"):
        super().__init__(provider_id)

    def respond(self, request, call):
        return f"A detailed 3D model of the object from image {request.image_id}, on a white background."


class ScriptedReasoner(MockReasoner):
    """Plays back ``responses`` in order (the last one repeats).

    Entries that are exceptions are raised instead of returned.
    """

    def __init__(self, responses: Sequence[str | BaseException], provider_id: str = "mock-scripted"):
        super().__init__(provider_id)
        if not responses:
            raise ValueError("need at least one scripted response")
        self.responses = list(responses)

    def respond(self, request, call):
        r = self.responses[min(call, len(self.responses)) - 1]
        if isinstance(r, BaseException):
            raise r
        return r




class ColorReasoner(MockReasoner):
    """Describes the image by the color name nearest its mean non-white pixel.

    Cheap, deterministic and content-dependent, which is all the hermetic
    pipeline needs from a describer.
    """

    def __init__(self, provider_id: str = "mock-color"):
        super().__init__(provider_id)

    def respond(self, request, call):
        px = decode_ppm(request.image_ppm).reshape(-1, 3).astype(np.float64)
        mask = px.min(axis=1) < 235
        fg = px[mask].mean(axis=0) if mask.any() else px.mean(axis=0)
        name = min(NAMED_COLORS, key=lambda k: float(np.sum((fg - NAMED_COLORS[k]) ** 2)))
        return (f"A single {name} object shown as a clean 3D model with smooth, solid surfaces, "
                f"matte {name} material and simple geometric style, isolated on a white background.")
