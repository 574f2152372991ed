"""Common-sense constraint evaluation against a knowledge provider.

Two providers are available: a static knowledge-base file (offline, the
source of truth for tests and reproducible runs) and a remote LLM service
queried with fixed prompt templates. Remote answers are cached per run and
degrade to the knowledge base on failure.
"""

from __future__ import annotations

import json
import math
import os
import re
import threading
import time
import urllib.request
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .geometry import Box7DoF
from .psl import ConstraintVector

__all__ = [
    "SizePrior",
    "SceneContext",
    "SizeConstraintConfig",
    "KnowledgeBase",
    "load_knowledge_base",
    "default_knowledge_base",
    "MissingSizePriorError",
    "ProviderError",
    "StaticKnowledgeProvider",
    "RemoteKnowledgeProvider",
    "LlmClient",
    "SCENE_DESCRIBE_PROMPT",
    "size_prompt",
    "scene_prompt",
    "parse_size_reply",
    "parse_yes_no",
    "llm_query_size",
    "llm_query_scene",
    "size_fit",
    "size_constraint",
    "scene_constraint",
    "confidence_constraint",
    "constraint_vector",
]

ENDPOINT_ENV = "GLRD_LLM_ENDPOINT"
API_KEY_ENV = "GLRD_LLM_KEY"

# Prompt templates sent verbatim to the language model.
SCENE_DESCRIBE_PROMPT = "What kind of scene is it mostly like? Describe the scene."


def size_prompt(label: str) -> str:
    return (
        f"What is the common size of a {label}? "
        "Answer in the format of length*width*height."
    )


def scene_prompt(label: str, scene_type: str) -> str:
    return f"Is it normal to see a {label} in a {scene_type}?"


@dataclass(frozen=True)
class SizePrior:
    """Standard length/width/height of a class, meters."""

    length: float
    width: float
    height: float

    def __post_init__(self) -> None:
        if self.length <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError(
                f"size prior must be positive, got ({self.length}, {self.width}, {self.height})"
            )


@dataclass(frozen=True)
class SceneContext:
    """Scene type plus an optional free-text description."""

    scene_type: str
    description: str = ""

    def __post_init__(self) -> None:
        if not self.scene_type:
            raise ValueError("scene_type must be non-empty")


@dataclass(frozen=True)
class SizeConstraintConfig:
    """Decay rate and relative-error deadband for the size constraint."""

    alpha: float = 0.25
    phi_size: float = 0.05

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")
        if not 0 <= self.phi_size < 1:
            raise ValueError(f"phi_size must be in [0, 1), got {self.phi_size}")


class MissingSizePriorError(LookupError):
    """No size prior available for a class name."""

    def __init__(self, label: str):
        super().__init__(f"no size prior for class {label!r}")
        self.label = label


class ProviderError(RuntimeError):
    """A knowledge provider failed to answer."""


@dataclass
class KnowledgeBase:
    """Offline stand-in for LLM answers: sizes, scene compatibility, novel set."""

    sizes: dict[str, SizePrior] = field(default_factory=dict)
    compat: dict[str, set[str]] = field(default_factory=dict)
    novel_classes: set[str] = field(default_factory=set)

    def __post_init__(self) -> None:
        missing = sorted(c for c in self.novel_classes if c not in self.sizes)
        if missing:
            raise ValueError(f"novel classes without a size entry: {missing}")

    @classmethod
    def from_dict(cls, data: Mapping) -> "KnowledgeBase":
        sizes = {
            label: SizePrior(*map(float, dims)) for label, dims in data.get("sizes", {}).items()
        }
        compat = {
            scene: set(classes) for scene, classes in data.get("compat", {}).items()
        }
        return cls(sizes, compat, set(data.get("novel_classes", [])))

    def to_dict(self) -> dict:
        return {
            "sizes": {
                label: [p.length, p.width, p.height]
                for label, p in sorted(self.sizes.items())
            },
            "compat": {scene: sorted(cls) for scene, cls in sorted(self.compat.items())},
            "novel_classes": sorted(self.novel_classes),
        }


def load_knowledge_base(path) -> KnowledgeBase:
    with open(path, encoding="utf-8") as fh:
        return KnowledgeBase.from_dict(json.load(fh))


def default_knowledge_base() -> KnowledgeBase:
    """The indoor-furniture knowledge base shipped with the package."""
    from importlib.resources import files

    text = files("ovrefine.data").joinpath("kb_indoor.json").read_text(encoding="utf-8")
    return KnowledgeBase.from_dict(json.loads(text))


class StaticKnowledgeProvider:
    """Answers size and scene queries from a knowledge base, offline."""

    def __init__(self, kb: KnowledgeBase):
        self.kb = kb

    def size_prior(self, label: str) -> SizePrior:
        try:
            return self.kb.sizes[label]
        except KeyError:
            raise MissingSizePriorError(label) from None

    def scene_compatible(self, label: str, scene_type: str) -> int:
        compatible = self.kb.compat.get(scene_type)
        if compatible is None:
            # unknown scene: absence of evidence should not delete detections
            return 1
        return 1 if label in compatible else 0

    def is_novel(self, label: str) -> bool:
        return label in self.kb.novel_classes


def _http_post(url: str, api_key: str | None, payload: dict, timeout: float) -> dict:
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    request = urllib.request.Request(
        url, data=json.dumps(payload).encode("utf-8"), headers=headers
    )
    with urllib.request.urlopen(request, timeout=timeout) as response:
        return json.loads(response.read().decode("utf-8"))


class LlmClient:
    """Minimal client for the remote completion endpoint.

    The wire format is a POST of ``{"prompt": ..., "max_tokens": ...}``
    answered by ``{"text": ...}``. Endpoint and key default to the
    GLRD_LLM_ENDPOINT / GLRD_LLM_KEY environment variables. At most
    ``max_in_flight`` requests run concurrently; failures are retried
    with exponential backoff before giving up.
    """

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        timeout: float = 10.0,
        retries: int = 2,
        backoff: float = 0.5,
        max_in_flight: int = 4,
        max_tokens: int = 64,
        transport: Callable[[str, str | None, dict, float], dict] | None = None,
    ):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        self.api_key = api_key or os.environ.get(API_KEY_ENV)
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.max_tokens = max_tokens
        self._transport = transport or _http_post
        self._gate = threading.BoundedSemaphore(max_in_flight)

    def complete(self, prompt: str, max_tokens: int | None = None) -> str:
        if not self.endpoint:
            raise ProviderError(f"no LLM endpoint configured (set {ENDPOINT_ENV})")
        payload = {"prompt": prompt, "max_tokens": max_tokens or self.max_tokens}
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt and self.backoff > 0:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._gate:
                    body = self._transport(self.endpoint, self.api_key, payload, self.timeout)
                return str(body["text"])
            except (OSError, ValueError, KeyError, TypeError) as exc:
                last_error = exc
        raise ProviderError(
            f"LLM request failed after {self.retries + 1} attempts: {last_error}"
        )


_TRIPLE_RE = re.compile(
    r"(\d+(?:\.\d+)?)\s*\*\s*(\d+(?:\.\d+)?)\s*\*\s*(\d+(?:\.\d+)?)"
    r"\s*(centimeters?|millimeters?|meters?|cm|mm|m)?\b",
    re.IGNORECASE,
)

_UNIT_SCALE = {"m": 1.0, "meter": 1.0, "cm": 0.01, "centimeter": 0.01, "mm": 0.001, "millimeter": 0.001}


def parse_size_reply(text: str) -> SizePrior | None:
    """Extract the first ``number*number*number`` triple from a reply.

    Dimensions are interpreted in meters unless a cm/mm suffix follows the
    triple. Returns None when no well-formed triple is present.
    """
    match = _TRIPLE_RE.search(text)
    if match is None:
        return None
    unit = (match.group(4) or "m").lower().rstrip("s")
    scale = _UNIT_SCALE.get(unit, 1.0)
    dims = [float(g) * scale for g in match.groups()[:3]]
    if any(d <= 0 for d in dims):
        return None
    return SizePrior(*dims)


_YES_WORDS = {"yes", "yeah", "yep", "sure", "certainly", "absolutely", "definitely"}
_NO_WORDS = {"no", "nope", "never"}


def parse_yes_no(text: str) -> int | None:
    """1 for an affirmative-leading reply, 0 for negative-leading, else None."""
    match = re.search(r"[A-Za-z]+", text)
    if match is None:
        return None
    word = match.group().lower()
    if word in _YES_WORDS:
        return 1
    if word in _NO_WORDS:
        return 0
    return None


def llm_query_size(label: str, client: LlmClient, kb: KnowledgeBase | None = None) -> SizePrior:
    """Ask the model for a class's common size; parse failures fall back to the KB."""
    reply = client.complete(size_prompt(label))
    prior = parse_size_reply(reply)
    if prior is not None:
        return prior
    if kb is not None and label in kb.sizes:
        return kb.sizes[label]
    raise ProviderError(f"unparseable size reply for {label!r}: {reply!r}")


def llm_query_scene(
    label: str, scene_type: str, client: LlmClient, kb: KnowledgeBase | None = None
) -> int:
    """Ask whether a class belongs in a scene; ambiguity falls back to the KB."""
    reply = client.complete(scene_prompt(label, scene_type))
    verdict = parse_yes_no(reply)
    if verdict is not None:
        return verdict
    if kb is not None:
        return StaticKnowledgeProvider(kb).scene_compatible(label, scene_type)
    raise ProviderError(
        f"ambiguous scene reply for {label!r} in {scene_type!r}: {reply!r}"
    )


class RemoteKnowledgeProvider:
    """Knowledge provider backed by the LLM endpoint.

    Answers are cached per (class) and (scene, class) for the life of the
    provider; on remote failure the knowledge base, when given, answers
    instead. Novel-class gating always comes from the knowledge base.
    """

    def __init__(self, client: LlmClient, kb: KnowledgeBase | None = None):
        self.client = client
        self.kb = kb
        self._size_cache: dict[str, SizePrior] = {}
        self._scene_cache: dict[tuple[str, str], int] = {}
        self._lock = threading.Lock()

    def size_prior(self, label: str) -> SizePrior:
        with self._lock:
            cached = self._size_cache.get(label)
        if cached is not None:
            return cached
        try:
            prior = llm_query_size(label, self.client, self.kb)
        except ProviderError:
            if self.kb is not None and label in self.kb.sizes:
                prior = self.kb.sizes[label]
            else:
                raise
        with self._lock:
            return self._size_cache.setdefault(label, prior)

    def scene_compatible(self, label: str, scene_type: str) -> int:
        key = (scene_type, label)
        with self._lock:
            cached = self._scene_cache.get(key)
        if cached is not None:
            return cached
        try:
            verdict = llm_query_scene(label, scene_type, self.client, self.kb)
        except ProviderError:
            if self.kb is not None:
                verdict = StaticKnowledgeProvider(self.kb).scene_compatible(label, scene_type)
            else:
                raise
        with self._lock:
            return self._scene_cache.setdefault(key, verdict)

    def is_novel(self, label: str) -> bool:
        if self.kb is None:
            return True
        return label in self.kb.novel_classes


# --------------------------------------------------------------------------
# Constraints


def size_fit(measured: float, standard: float, cfg: SizeConstraintConfig) -> float:
    """Exponential decay of the relative size error beyond the deadband.

    exp(-alpha * max(0, |measured - standard| / standard - phi_size));
    equals 1 while the relative error stays within phi_size.
    """
    if standard <= 0:
        raise ValueError(f"standard dimension must be positive, got {standard}")
    excess = max(0.0, abs(measured - standard) / standard - cfg.phi_size)
    return math.exp(-cfg.alpha * excess)


def size_constraint(box: Box7DoF, prior: SizePrior, cfg: SizeConstraintConfig) -> float:
    """Mean per-dimension fit of a box against a class's standard size."""
    return (
        size_fit(box.l, prior.length, cfg)
        + size_fit(box.w, prior.width, cfg)
        + size_fit(box.h, prior.height, cfg)
    ) / 3.0


def scene_constraint(label: str, scene_type: str, provider) -> int:
    """1 when the class is judged reasonable in the scene, else 0."""
    verdict = provider.scene_compatible(label, scene_type)
    if verdict not in (0, 1):
        raise ValueError(f"provider returned non-binary scene verdict {verdict!r}")
    return verdict


def confidence_constraint(score: float) -> float:
    """Identity on the detector confidence score."""
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"confidence score must be in [0, 1], got {score}")
    return score


def constraint_vector(
    box: Box7DoF,
    label: str,
    score: float,
    scene: SceneContext,
    provider,
    cfg: SizeConstraintConfig = SizeConstraintConfig(),
) -> ConstraintVector:
    """Assemble the (confidence, size, scene) constraints for one detection."""
    prior = provider.size_prior(label)
    return ConstraintVector(
        confidence_constraint(score),
        size_constraint(box, prior, cfg),
        scene_constraint(label, scene.scene_type, provider),
    )
