"""Adapters for external judge, summarizer and embedder services.

Transport is caller-provided: an adapter wraps a plain callable that takes a
request record and returns a response record (or raises ``TimeoutError``).
Adapters add rate limiting, retries, schema validation and fallbacks.
"""

from __future__ import annotations

import collections
import time
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .errors import AdapterTimeout, EmptyText, SchemaViolation, SummarizerFailure
from .experience import GUIDANCE_LISTS, Comparison, PromptEmbedder, TemplateSummarizer
from .protocol import program_to_dict, serialize_trajectory
from .reward import RenderedOutcome, RubricScores, RuleJudge, rubric_from_dict

Transport = Callable[[Mapping[str, Any]], Mapping[str, Any]]


@dataclass(frozen=True)
class AdapterConfig:
    endpoint: str = "local"
    timeout: float = 90.0
    rpm_cap: int = 80
    retries: int = 1
    fallback: str = "use_builtin"  # or "fail"

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.rpm_cap <= 0:
            raise ValueError("rate cap must be positive")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")
        if self.fallback not in ("use_builtin", "fail"):
            raise ValueError(f"unknown fallback {self.fallback!r}")


class RateLimiter:
    """Sliding 60 s window; ``acquire`` sleeps until a slot frees up."""

    def __init__(self, cap: int, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep, window: float = 60.0):
        self.cap, self.clock, self.sleep, self.window = cap, clock, sleep, window
        self.issued: collections.deque[float] = collections.deque()

    def acquire(self) -> float:
        while True:
            now = self.clock()
            while self.issued and now - self.issued[0] >= self.window:
                self.issued.popleft()
            if len(self.issued) < self.cap:
                self.issued.append(now)
                return now
            self.sleep(self.window - (now - self.issued[0]))


class ServiceAdapter:
    def __init__(self, transport: Transport, config: AdapterConfig = AdapterConfig(),
                 limiter: RateLimiter | None = None):
        self.transport = transport
        self.config = config
        self.limiter = limiter or RateLimiter(config.rpm_cap)

    def request(self, payload: Mapping[str, Any]) -> Mapping[str, Any]:
        """Send with retries; raises :class:`AdapterTimeout` once retries run out."""
        last: Exception | None = None
        for _ in range(self.config.retries + 1):
            self.limiter.acquire()
            try:
                return self.transport({**payload, "timeout": self.config.timeout})
            except TimeoutError as exc:
                last = exc
        raise AdapterTimeout(f"{self.config.endpoint}: no response within {self.config.timeout}s") from last


def judge_request(program, outcome: RenderedOutcome | None, gt) -> dict[str, Any]:
    """Judge request record: the program, resolved references and the request criteria."""
    return {
        "program": program_to_dict(program),
        "references": [dict(r) for r in (outcome.references if outcome else ())],
        "required_text": gt.required_text_token,
        "required_skills": list(gt.required_skills),
        "request_nouns": list(gt.request_nouns),
    }


def call_judge(adapter: ServiceAdapter, request: Mapping[str, Any],
               builtin: Callable[[], RubricScores] | None = None) -> RubricScores:
    """Ask the external judge; responses must already lie on the 3-level scale.

    A schema violation always propagates. A timeout falls back to ``builtin``
    when the adapter is configured with ``use_builtin``.
    """
    try:
        response = adapter.request(request)
    except AdapterTimeout:
        if adapter.config.fallback == "use_builtin" and builtin is not None:
            return builtin()
        raise
    return rubric_from_dict(response)


class ExternalJudge:
    """Judge protocol over an adapter, with the rule judge as fallback."""

    def __init__(self, adapter: ServiceAdapter):
        self.adapter = adapter
        self.builtin = RuleJudge()

    def judge_image(self, program, outcome, gt):
        return call_judge(self.adapter, judge_request(program, outcome, gt),
                          lambda: self.builtin.judge_image(program, outcome, gt))

    def judge_text(self, program, gt, observed_img_ids=None):
        return self.builtin.judge_text(program, gt, observed_img_ids)


class ExternalSummarizer:
    """Summarizer protocol over an adapter; responses must carry the full bundle schema."""

    def __init__(self, adapter: ServiceAdapter):
        self.adapter = adapter
        self.builtin = TemplateSummarizer()

    def summarize(self, c: Comparison) -> Mapping[str, Any]:
        req = {
            "prompt": c.request_text,
            "best": {"reward": c.best_reward.mixed, "trajectory": serialize_trajectory(c.best)},
            "worst": {"reward": c.worst_reward.mixed, "trajectory": serialize_trajectory(c.worst)},
        }
        try:
            rec = self.adapter.request(req)
        except AdapterTimeout as exc:
            if self.adapter.config.fallback == "use_builtin":
                return self.builtin.summarize(c)
            raise SummarizerFailure(str(exc)) from exc
        _check_bundle_schema(rec)
        return rec


def _check_bundle_schema(rec: Mapping[str, Any]) -> None:
    try:
        key, dg = rec["retrieval_key"], rec["decision_guidance"]
        ok = isinstance(key["trigger"], str) and isinstance(key["source_prompt_summary"], str)
        ok = ok and isinstance(dg["decision_focus"], str)
        ok = ok and all(
            isinstance(dg[k], list) and all(isinstance(i, str) for i in dg[k]) for k in GUIDANCE_LISTS
        )
    except (KeyError, TypeError):
        ok = False
    if not ok:
        raise SummarizerFailure("summarizer response does not match the bundle schema")


class ExternalEmbedder(PromptEmbedder):
    """Embedder over an adapter returning ``{"embedding": [...]}``; output is re-normalised."""

    def __init__(self, adapter: ServiceAdapter | None = None, n_features: int = 2**12, vocabulary=None):
        super().__init__(n_features, vocabulary)
        self.adapter = adapter

    def transform(self, X: Sequence[str]) -> np.ndarray:
        if self.adapter is None:
            return super().transform(X)
        rows = []
        for text in X:
            if not text or not text.strip():
                raise EmptyText("empty prompt")
            try:
                v = np.asarray(self.adapter.request({"text": text})["embedding"], dtype=float)
            except AdapterTimeout:
                if self.adapter.config.fallback == "use_builtin":
                    v = super().transform([text])[0]
                else:
                    raise
            norm = np.linalg.norm(v)
            if not np.isfinite(norm) or norm == 0:
                raise SchemaViolation("embedding must be a finite non-zero vector")
            rows.append(v / norm)
        return np.stack(rows)


__all__ = [
    "AdapterConfig",
    "RateLimiter",
    "ServiceAdapter",
    "call_judge",
    "judge_request",
    "ExternalJudge",
    "ExternalSummarizer",
    "ExternalEmbedder",
]
