"""Best-worst comparison mining, experience bundles and the retrieval buffer.

A bundle is a compact decision guide distilled from one comparison. It is
keyed by the source prompt's embedding and, at training time, rendered into
the teacher's context as a guidance feature block.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.feature_extraction.text import CountVectorizer, HashingVectorizer
from sklearn.preprocessing import normalize

from .errors import EmptyText, SummarizerFailure
from .policy import FeatureLayout, Vocabulary
from .protocol import ORDINALS, Trajectory
from .reward import SKILL_FAILURE_TAGS, RewardReport

GUIDANCE_LISTS = (
    "recommended_tool_plan",
    "search_query_guidance",
    "skill_routing_guidance",
    "reference_selection_guidance",
    "prompt_program_guidance",
    "failure_guards",
)
STANDARD_PREFIX = "Standard:"
AVOID_PREFIX = "Avoid"

# ---------------------------------------------------------------------------
# Comparisons


@dataclass(frozen=True)
class Comparison:
    prompt_id: str
    request_text: str
    best: Trajectory
    best_reward: RewardReport
    worst: Trajectory
    worst_reward: RewardReport
    delta: float
    best_index: int = 0
    worst_index: int = 0


def mine_comparison(group, delta_min: float = 0.20) -> Comparison | None:
    """Best/worst pair of a rollout group if their mixed-reward gap clears the gate."""
    mixed = np.array([r.mixed for r in group.rewards], dtype=float)
    if mixed.size < 2:
        return None
    bi, wi = int(np.argmax(mixed)), int(np.argmin(mixed))
    best_r, worst_r = group.rewards[bi], group.rewards[wi]
    if best_r.protocol_failed or worst_r.protocol_failed:
        return None
    delta = float(mixed[bi] - mixed[wi])
    if delta < delta_min:
        return None
    best, worst = group.trajectories[bi], group.trajectories[wi]
    return Comparison(group.prompt_id, best.request_text, best, best_r, worst, worst_r, delta, bi, wi)


# ---------------------------------------------------------------------------
# Bundles


@dataclass(frozen=True)
class ExperienceBundle:
    trigger: str
    source_prompt_summary: str
    decision_focus: str
    recommended_tool_plan: tuple[str, ...] = ()
    search_query_guidance: tuple[str, ...] = ()
    skill_routing_guidance: tuple[str, ...] = ()
    reference_selection_guidance: tuple[str, ...] = ()
    prompt_program_guidance: tuple[str, ...] = ()
    failure_guards: tuple[str, ...] = ()
    source_prompt_id: str = ""
    source_embedding: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(0), compare=False)
    reward_gap: float = 0.0
    insertion_index: int = -1

    def guidance(self) -> dict[str, tuple[str, ...]]:
        return {name: getattr(self, name) for name in GUIDANCE_LISTS}


def bundle_to_dict(b: ExperienceBundle) -> dict[str, Any]:
    """Bundle record: the retrieval key and decision guidance schema plus bookkeeping."""
    return {
        "retrieval_key": {"trigger": b.trigger, "source_prompt_summary": b.source_prompt_summary},
        "decision_guidance": {"decision_focus": b.decision_focus, **{k: list(v) for k, v in b.guidance().items()}},
        "source_prompt_id": b.source_prompt_id,
        "source_embedding": [float(x) for x in b.source_embedding],
        "reward_gap": b.reward_gap,
        "insertion_index": b.insertion_index,
    }


def bundle_from_dict(d: Mapping[str, Any]) -> ExperienceBundle:
    key, dg = d["retrieval_key"], d["decision_guidance"]
    return ExperienceBundle(
        trigger=key["trigger"],
        source_prompt_summary=key["source_prompt_summary"],
        decision_focus=dg["decision_focus"],
        **{k: tuple(dg.get(k, ())) for k in GUIDANCE_LISTS},
        source_prompt_id=d.get("source_prompt_id", ""),
        source_embedding=np.asarray(d.get("source_embedding", []), dtype=float),
        reward_gap=float(d.get("reward_gap", 0.0)),
        insertion_index=int(d.get("insertion_index", -1)),
    )


def render_bundle(b: ExperienceBundle) -> str:
    """Injection text: trigger, summary, focus, then the six guidance lists."""
    lines = [
        f"Trigger: {b.trigger}",
        f"Source-Prompt Summary: {b.source_prompt_summary}",
        f"Decision Focus: {b.decision_focus}",
    ]
    for name in GUIDANCE_LISTS:
        lines.append(name.replace("_", " ").title() + ":")
        lines += [f"- {item}" for item in getattr(b, name)]
    return "\n".join(lines)


class Summarizer(Protocol):
    def summarize(self, c: Comparison) -> Mapping[str, Any]:
        """Return the retrieval key and decision guidance record."""


_ORDINAL_RE = re.compile(r"the (" + "|".join(ORDINALS) + r") reference image", re.I)


def _plan(t: Trajectory) -> list[str]:
    return [c.tool_name for c in t.tool_calls()] + ["answer"]


def _queries(t: Trajectory, tool: str) -> list[str]:
    return list(dict.fromkeys(c.query_text() for c in t.tool_calls() if c.tool_name == tool))


def _refs(t: Trajectory) -> list[str]:
    return list(t.program.ref_ids) if t.program else []


def _ordinals(t: Trajectory) -> list[str]:
    return [m.lower() for m in _ORDINAL_RE.findall(t.program.gen_prompt)] if t.program else []


def _diff(
    best: Sequence[str],
    worst: Sequence[str],
    good: Callable[[str], str],
    bad: Callable[[str], str],
    trust_best: bool = True,
    blame_worst: bool = True,
) -> list[str]:
    """Items for best-only choices and ``Avoid`` items for worst-only ones;
    ``Standard:`` restatements of the best side when nothing differs.

    ``trust_best``/``blame_worst`` gate each side on whether the judge
    flagged that dimension, so a lucky best side is not recommended wholesale.
    """
    b_set, w_set = set(best), set(worst)
    if b_set == w_set:
        return [f"{STANDARD_PREFIX} {good(x)}" for x in best] if trust_best else []
    items = [good(x) for x in best if x not in w_set] if trust_best else []
    if blame_worst:
        items += [bad(x) for x in worst if x not in b_set]
    return items


_TAG_HINTS = {
    "wrong_reference": "Guard against wrong_reference: only select images whose titles match the request subject.",
    "wrong_fact": "Guard against wrong_fact: verify the key fact with search before writing the program.",
    "missing_text": "Guard against missing_text: call query_knowledge for text_rendering and quote the text verbatim.",
    "weak_request_coverage": "Guard against weak_request_coverage: restate every request noun in the program.",
    "duplicate_references": "Guard against duplicate_references: keep one image per subject.",
}
_TAG_HINTS.update({tag: f"Guard against {tag}: call query_knowledge for {skill}." for skill, tag in SKILL_FAILURE_TAGS.items()})


class TemplateSummarizer:
    """Deterministic rule-based summarizer over structural best/worst diffs."""

    def summarize(self, c: Comparison) -> dict[str, Any]:
        best, worst = c.best, c.worst
        b_plan, w_plan = _plan(best), _plan(worst)
        if b_plan == w_plan:
            tool_plan = [f"{STANDARD_PREFIX} Follow the tool plan {' -> '.join(b_plan)}."]
        else:
            tool_plan = [f"Follow the tool plan {' -> '.join(b_plan)}."]
            missing = [t for t in dict.fromkeys(b_plan) if t not in w_plan]
            tool_plan += [f"Call {t} before answering." for t in missing]

        b_tags = set(c.best_reward.rubric.failure_tags)
        w_tags = set(c.worst_reward.rubric.failure_tags)
        search = _diff(_queries(best, "search"), _queries(worst, "search"),
                       lambda q: f"Search '{q}' to ground the key fact.",
                       lambda q: f"{AVOID_PREFIX} the search query '{q}'.",
                       "wrong_fact" not in b_tags, "wrong_fact" in w_tags)
        search += _diff(_queries(best, "image_search"), _queries(worst, "image_search"),
                        lambda q: f"Look up images with '{q}'.",
                        lambda q: f"{AVOID_PREFIX} the image query '{q}'.",
                        "wrong_reference" not in b_tags, "wrong_reference" in w_tags)
        # only route skills the judge actually assessed for this prompt
        assessed = {**c.worst_reward.rubric.skill_diagnostics, **c.best_reward.rubric.skill_diagnostics}
        skills = _diff([s for s in best.called_skills() if s in assessed],
                       [s for s in worst.called_skills() if s in assessed],
                       lambda s: f"Call query_knowledge for {s}.", lambda s: f"{AVOID_PREFIX} loading {s}.",
                       blame_worst=False)
        skills += [f"Call query_knowledge for {s}." for s, v in sorted(assessed.items())
                   if v == "fail" and s not in best.called_skills()]
        refs = _diff(_refs(best), _refs(worst),
                     lambda r: f"Select {r} as a reference.", lambda r: f"{AVOID_PREFIX} selecting {r}.",
                     "wrong_reference" not in b_tags, "wrong_reference" in w_tags)
        b_ord, w_ord = _ordinals(best), _ordinals(worst)
        program = []
        if b_ord:
            item = f"Bind references with ordinals {', '.join(b_ord)}."
            program.append(item if b_ord != w_ord else f"{STANDARD_PREFIX} {item}")
        if best.program and worst.program and best.program.gen_prompt == worst.program.gen_prompt:
            program.append(f"{STANDARD_PREFIX} Keep the program fields of the better trajectory.")
        elif best.program is not None:
            program.append("Ground every fact from search results inside the program.")
        guards = [_TAG_HINTS.get(t, f"Guard against {t}.") for t in sorted(w_tags - b_tags)]

        diffs = {
            "tool plan": b_plan != w_plan,
            "search queries": set(_queries(best, "search")) != set(_queries(worst, "search")),
            "skill routing": set(best.called_skills()) != set(worst.called_skills()),
            "reference selection": set(_refs(best)) != set(_refs(worst)),
        }
        focus = next((k for k, v in diffs.items() if v), "program wording")
        return {
            "retrieval_key": {
                "trigger": f"Requests like: {_summary(c.request_text, 12)}",
                "source_prompt_summary": _summary(c.request_text, 40),
            },
            "decision_guidance": {
                "decision_focus": f"The decisive difference was {focus} (reward gap {c.delta:.3f}).",
                "recommended_tool_plan": tool_plan,
                "search_query_guidance": search,
                "skill_routing_guidance": skills,
                "reference_selection_guidance": refs,
                "prompt_program_guidance": program,
                "failure_guards": guards,
            },
        }


def _summary(text: str, n_words: int) -> str:
    ws = text.split()
    return " ".join(ws[:n_words]) + (" ..." if len(ws) > n_words else "")


def summarize_bundle(
    c: Comparison,
    summarizer: Summarizer | None = None,
    embedder: "PromptEmbedder | None" = None,
) -> ExperienceBundle:
    rec = (summarizer or TemplateSummarizer()).summarize(c)
    try:
        b = bundle_from_dict({**rec, "source_prompt_id": c.prompt_id, "reward_gap": c.delta})
    except (KeyError, TypeError) as exc:
        raise SummarizerFailure(f"summarizer returned a malformed record: {exc}") from exc
    return dataclasses.replace(b, source_embedding=embed_prompt(c.request_text, embedder))


# ---------------------------------------------------------------------------
# Embedding


class PromptEmbedder(BaseEstimator, TransformerMixin):
    """Feature-hashed token counts, L2-normalised.

    With ``vocabulary`` given, tokens map to exact columns (no collisions).
    Stateless: ``fit`` only validates parameters.
    """

    def __init__(self, n_features: int = 2**12, vocabulary: Sequence[str] | None = None):
        self.n_features = n_features
        self.vocabulary = vocabulary

    def _vectorizer(self):
        pattern = r"(?u)\b\w+\b"
        if self.vocabulary is not None:
            return CountVectorizer(vocabulary=list(self.vocabulary), token_pattern=pattern)
        return HashingVectorizer(n_features=self.n_features, alternate_sign=False, norm=None,
                                 token_pattern=pattern)

    def fit(self, X=None, y=None):
        return self

    def transform(self, X: Iterable[str]) -> np.ndarray:
        X = list(X)
        counts = self._vectorizer().fit_transform(X) if self.vocabulary is not None else self._vectorizer().transform(X)
        dense = counts.toarray().astype(float)
        if np.any(dense.sum(axis=1) == 0):
            raise EmptyText("cannot embed text without tokens")
        return normalize(dense, norm="l2")


_DEFAULT_EMBEDDER = PromptEmbedder()


def embed_prompt(text: str, embedder: PromptEmbedder | None = None) -> np.ndarray:
    if not text or not text.strip():
        raise EmptyText("empty prompt")
    return (embedder or _DEFAULT_EMBEDDER).transform([text])[0]


# ---------------------------------------------------------------------------
# Buffer


class ExperienceBuffer:
    def __init__(
        self,
        capacity: int = 500,
        gate: float = 0.84,
        delta_min: float = 0.20,
        max_comparisons_per_step: int = 8,
    ):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.gate = gate
        self.delta_min = delta_min
        self.max_comparisons_per_step = max_comparisons_per_step
        self.entries: list[ExperienceBundle] = []
        self.next_index = 0
        self._matrix: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def insert(self, bundle: ExperienceBundle) -> ExperienceBundle:
        """Append; over capacity, drop the smallest reward gap (oldest first)."""
        if bundle.reward_gap < self.delta_min:
            raise ValueError(f"reward gap {bundle.reward_gap} below {self.delta_min}")
        stored = dataclasses.replace(bundle, insertion_index=self.next_index)
        self.next_index += 1
        self.entries.append(stored)
        if len(self.entries) > self.capacity:
            victim = min(range(len(self.entries)),
                         key=lambda i: (self.entries[i].reward_gap, self.entries[i].insertion_index))
            del self.entries[victim]
        self._matrix = None
        return stored

    def similarities(self, query: np.ndarray) -> np.ndarray:
        if not self.entries:
            return np.zeros(0)
        if self._matrix is None:
            self._matrix = np.stack([e.source_embedding for e in self.entries])
        return self._matrix @ np.asarray(query, dtype=float)

    def retrieve(self, query: np.ndarray, gate: float | None = None) -> ExperienceBundle | None:
        """Nearest bundle by cosine if it clears the gate; ties go to the oldest."""
        hit = self.retrieve_with_score(query, gate)
        return hit[0] if hit else None

    def retrieve_with_score(self, query, gate=None) -> tuple[ExperienceBundle, float] | None:
        sims = self.similarities(query)
        if sims.size == 0:
            return None
        # entries stay in insertion order, so argmax's first hit is the oldest
        i = int(np.argmax(sims))
        if sims[i] < (self.gate if gate is None else gate):
            return None
        return self.entries[i], float(sims[i])

    def to_dict(self) -> dict[str, Any]:
        return {
            "capacity": self.capacity,
            "gate": self.gate,
            "delta_min": self.delta_min,
            "max_comparisons_per_step": self.max_comparisons_per_step,
            "next_index": self.next_index,
            "entries": [bundle_to_dict(b) for b in self.entries],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperienceBuffer":
        buf = cls(d["capacity"], d["gate"], d["delta_min"], d["max_comparisons_per_step"])
        buf.entries = [bundle_from_dict(e) for e in d["entries"]]
        buf.next_index = int(d["next_index"])
        return buf


def insert_bundle(buf: ExperienceBuffer, bundle: ExperienceBundle) -> None:
    buf.insert(bundle)


def retrieve_bundle(buf: ExperienceBuffer, query_embedding: np.ndarray, gate: float | None = None):
    return buf.retrieve(query_embedding, gate)


def dump_snapshot(buf: ExperienceBuffer) -> str:
    return json.dumps(buf.to_dict(), sort_keys=True, indent=1)


def save_snapshot(path: str, buf: ExperienceBuffer) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_snapshot(buf))


def load_snapshot(path: str) -> ExperienceBuffer:
    with open(path, encoding="utf-8") as fh:
        return ExperienceBuffer.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# Teacher context patching

_WORD_RE = re.compile(r"[A-Za-z0-9_]+")


def guidance_features(bundle: ExperienceBundle, vocab: Vocabulary, layout: FeatureLayout) -> np.ndarray:
    """Guidance block for a bundle.

    Vocabulary tokens named in list items get +1 per mention (-1 inside
    ``Avoid`` items), clipped to [-1, 1]; all rendered words also feed the
    hashed bag.
    """
    weights: dict[int, float] = {}
    for name in GUIDANCE_LISTS:
        for item in getattr(bundle, name):
            body = item[len(STANDARD_PREFIX):].lstrip() if item.startswith(STANDARD_PREFIX) else item
            sign = -1.0 if body.startswith(AVOID_PREFIX) else 1.0
            for w in _WORD_RE.findall(body):
                if w in vocab:
                    tid = vocab.id(w)
                    weights[tid] = weights.get(tid, 0.0) + sign
    weights = {t: float(np.clip(v, -1.0, 1.0)) for t, v in weights.items() if v != 0}
    words = [w.lower() for w in _WORD_RE.findall(render_bundle(bundle))]
    return layout.guidance_block(weights, words)


def patch_context(
    plain_context: np.ndarray,
    bundle: ExperienceBundle,
    vocab: Vocabulary,
    layout: FeatureLayout,
    block: np.ndarray | None = None,
) -> np.ndarray:
    """Teacher view: the plain context with the bundle's guidance block appended.

    Works on one context or a stack of them; the plain columns are untouched.
    """
    x = np.array(plain_context, dtype=float, copy=True)
    x[..., layout.n_hist :] = guidance_features(bundle, vocab, layout) if block is None else block
    return x
