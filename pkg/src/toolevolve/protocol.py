"""Trajectory and program types, the line-delimited log format, and the
structural checks every agent trajectory must pass.

A trajectory log holds one JSON object per line::

    {"prompt_id": "p01", "request_text": "...", "protocol_status": "ok",
     "tool_call_count": 2,
     "turns": [
        {"thought": "...", "tool_call": {"name": "search",
                                         "arguments": {"queries": ["..."]}},
         "observation": {"source_tool": "search", "payload": [...]}},
        {"thought": "...", "answer": {"gen_prompt": "...",
                                      "reference_images": [{"img_id": "IMG_001",
                                                            "note": "..."}],
                                      "selected_skills": [], "rationale": ""}}],
     "tokens": [{"token": "search", "logp": -1.3, "decision": true,
                 "assistant": true}, ...]}

``tokens`` is optional and carries the sampled policy tokens with their
behaviour log-probabilities.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .errors import MalformedRecord, UnknownSkill, UnknownTool

TOOLS = ("search", "image_search", "query_knowledge")
SKILLS = (
    "spatial_layout",
    "aesthetic_drawing",
    "text_rendering",
    "creative_drawing",
    "anatomy_body_coherence",
    "attribute_binding",
    "physical_material_consistency",
    "quantity_counting",
)
ORDINALS = ("first", "second", "third", "fourth", "fifth")

DEFAULT_MAX_REFS = 5
DEFAULT_MAX_TOOL_CALLS = 10
MAX_LLM_CALL_PER_RUN = 11

VIOLATION_CODES = (
    "empty_prompt",
    "ordinal_mismatch",
    "raw_id_leak",
    "ref_count_out_of_range",
    "unknown_img_id",
    "unsorted_refs",
    "url_leak",
)
FILTER_REASONS = (
    "incomplete_loop",
    "invalid_ref_count",
    "invalid_skill_name",
    "missing_ordinal_wording",
    "no_image_search",
    "over_budget",
    "unparseable_answer",
    "url_or_id_leak",
)
DEDUP_FIELDS = ("main_person", "main_object", "scene_moment", "venue")

_IMG_ID_RE = re.compile(r"IMG_\d+")
_IMG_ID_FULL_RE = re.compile(r"^IMG_\d+$")
_URL_RE = re.compile(r"https?://", re.IGNORECASE)
_ORDINAL_RE = re.compile(
    r"\bthe (" + "|".join(ORDINALS) + r") reference image\b", re.IGNORECASE
)


def ordinal_phrase(position: int) -> str:
    """``ordinal_phrase(1) == "the first reference image"``."""
    return f"the {ORDINALS[position - 1]} reference image"


def img_sort_key(img_id: str) -> tuple[int, str]:
    m = re.search(r"\d+", img_id)
    return (int(m.group()) if m else -1, img_id)


# ---------------------------------------------------------------------------
# Types


@dataclass(frozen=True)
class ToolCall:
    tool_name: str
    arguments: Mapping[str, Any]
    turn_index: int = 0

    def __post_init__(self) -> None:
        if self.tool_name not in TOOLS:
            raise UnknownTool(self.tool_name)
        if self.tool_name == "query_knowledge":
            skill = self.arguments.get("skill_name")
            if skill not in SKILLS:
                raise UnknownSkill(str(skill))

    def query_text(self) -> str:
        if self.tool_name == "search":
            return " ".join(self.arguments.get("queries", []))
        if self.tool_name == "image_search":
            return str(self.arguments.get("query", ""))
        return str(self.arguments.get("skill_name", ""))


@dataclass(frozen=True)
class Observation:
    source_tool: str
    payload: tuple[Mapping[str, Any], ...] = ()

    def image_ids(self) -> list[str]:
        if self.source_tool != "image_search":
            return []
        return [rec["img_id"] for rec in self.payload if "img_id" in rec]


@dataclass(frozen=True)
class ReferenceSelection:
    img_id: str
    note: str


@dataclass(frozen=True)
class PromptReferenceProgram:
    gen_prompt: str
    reference_images: tuple[ReferenceSelection, ...]
    selected_skills: tuple[str, ...] = ()
    rationale: str = ""

    @property
    def ref_ids(self) -> list[str]:
        return [r.img_id for r in self.reference_images]


@dataclass(frozen=True)
class FinalAnswer:
    """Terminal action. ``program`` is None when the answer did not parse."""

    program: PromptReferenceProgram | None
    raw: Any = None


@dataclass(frozen=True)
class Turn:
    thought: str
    action: ToolCall | FinalAnswer
    observation: Observation | None = None


@dataclass(frozen=True)
class SampledToken:
    token: str
    logp: float
    decision: bool = False
    assistant: bool = True


@dataclass
class Trajectory:
    prompt_id: str
    request_text: str
    turns: list[Turn]
    tool_call_count: int
    protocol_status: str = "ok"
    tokens: list[SampledToken] = field(default_factory=list)
    # in-memory training payload (contexts, legal masks); never serialized
    records: Any = field(default=None, compare=False, repr=False)

    @property
    def failed(self) -> bool:
        return self.protocol_status != "ok"

    @property
    def failure_reason(self) -> str | None:
        if not self.failed:
            return None
        m = re.match(r"failed\((.*)\)$", self.protocol_status)
        return m.group(1) if m else self.protocol_status

    @property
    def final_answer(self) -> FinalAnswer | None:
        if self.turns and isinstance(self.turns[-1].action, FinalAnswer):
            return self.turns[-1].action
        return None

    @property
    def program(self) -> PromptReferenceProgram | None:
        fa = self.final_answer
        return fa.program if fa is not None else None

    def tool_calls(self) -> list[ToolCall]:
        return [t.action for t in self.turns if isinstance(t.action, ToolCall)]

    def observed_img_ids(self) -> list[str]:
        ids: list[str] = []
        for t in self.turns:
            if t.observation is not None:
                ids.extend(t.observation.image_ids())
        return ids

    def called_skills(self) -> list[str]:
        return [
            c.arguments["skill_name"]
            for c in self.tool_calls()
            if c.tool_name == "query_knowledge"
        ]


def failed_status(reason: str) -> str:
    return f"failed({reason})"


# ---------------------------------------------------------------------------
# Parsing and serialization


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise MalformedRecord(msg)


def _parse_program(raw: Any) -> PromptReferenceProgram | None:
    if not isinstance(raw, Mapping):
        return None
    gp = raw.get("gen_prompt")
    refs = raw.get("reference_images")
    if not isinstance(gp, str) or not isinstance(refs, list):
        return None
    selections = []
    for r in refs:
        if not isinstance(r, Mapping) or not isinstance(r.get("img_id"), str):
            return None
        selections.append(ReferenceSelection(r["img_id"], str(r.get("note", ""))))
    skills = raw.get("selected_skills", [])
    if not isinstance(skills, list) or not all(isinstance(s, str) for s in skills):
        return None
    return PromptReferenceProgram(
        gen_prompt=gp,
        reference_images=tuple(selections),
        selected_skills=tuple(skills),
        rationale=str(raw.get("rationale", "")),
    )


def _structural_failure(turns: Sequence[Turn]) -> str | None:
    answers = [i for i, t in enumerate(turns) if isinstance(t.action, FinalAnswer)]
    if len(answers) > 1:
        return "multiple_answers"
    if not answers:
        return "no_answer"
    if answers[0] != len(turns) - 1:
        return "answer_not_last"
    for t in turns[:-1]:
        if t.observation is None:
            return "missing_observation"
    seen: set[str] = set()
    for t in turns:
        if t.observation is None:
            continue
        for img in t.observation.image_ids():
            if img in seen:
                return "duplicate_img_id"
            seen.add(img)
    if turns[-1].action.program is None:  # type: ignore[union-attr]
        return "unparseable_answer"
    return None


def parse_trajectory(raw: str | Mapping[str, Any]) -> Trajectory:
    """Parse one log record into a :class:`Trajectory`.

    Recoverable structural problems are recorded in ``protocol_status``;
    unparseable records raise :class:`MalformedRecord`.
    """
    if isinstance(raw, (str, bytes)):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise MalformedRecord(f"not JSON: {exc}") from exc
    _require(isinstance(raw, Mapping), "record must be an object")
    assert isinstance(raw, Mapping)
    _require(isinstance(raw.get("prompt_id"), str), "prompt_id missing")
    _require(isinstance(raw.get("turns"), list), "turns missing")

    turns: list[Turn] = []
    for i, rt in enumerate(raw["turns"]):
        _require(isinstance(rt, Mapping), f"turn {i} must be an object")
        has_call = "tool_call" in rt
        has_answer = "answer" in rt
        _require(has_call != has_answer, f"turn {i} needs exactly one action")
        thought = rt.get("thought", "")
        _require(isinstance(thought, str), f"turn {i} thought must be text")
        action: ToolCall | FinalAnswer
        if has_call:
            call = rt["tool_call"]
            _require(isinstance(call, Mapping), f"turn {i} tool_call malformed")
            args = call.get("arguments", {})
            _require(isinstance(args, Mapping), f"turn {i} arguments malformed")
            action = ToolCall(str(call.get("name")), dict(args), i)
        else:
            action = FinalAnswer(_parse_program(rt["answer"]), rt["answer"])
        obs = None
        if rt.get("observation") is not None:
            ro = rt["observation"]
            _require(isinstance(ro, Mapping), f"turn {i} observation malformed")
            payload = ro.get("payload", [])
            _require(isinstance(payload, list), f"turn {i} payload malformed")
            obs = Observation(str(ro.get("source_tool")), tuple(payload))
        turns.append(Turn(thought, action, obs))

    tokens = []
    for rtok in raw.get("tokens", []):
        _require(isinstance(rtok, Mapping) and "token" in rtok, "bad token record")
        tokens.append(
            SampledToken(
                str(rtok["token"]),
                float(rtok.get("logp", 0.0)),
                bool(rtok.get("decision", False)),
                bool(rtok.get("assistant", True)),
            )
        )

    n_calls = sum(isinstance(t.action, ToolCall) for t in turns)
    reason = _structural_failure(turns)
    if reason is None and raw.get("tool_call_count", n_calls) != n_calls:
        reason = "count_mismatch"
    if reason is not None:
        status = failed_status(reason)
    else:
        status = raw.get("protocol_status", "ok")
        _require(isinstance(status, str), "protocol_status must be text")
    return Trajectory(
        prompt_id=raw["prompt_id"],
        request_text=str(raw.get("request_text", "")),
        turns=turns,
        tool_call_count=n_calls,
        protocol_status=status,
        tokens=tokens,
    )


def program_to_dict(p: PromptReferenceProgram) -> dict[str, Any]:
    return {
        "gen_prompt": p.gen_prompt,
        "reference_images": [
            {"img_id": r.img_id, "note": r.note} for r in p.reference_images
        ],
        "selected_skills": list(p.selected_skills),
        "rationale": p.rationale,
    }


def trajectory_to_dict(t: Trajectory) -> dict[str, Any]:
    turns = []
    for turn in t.turns:
        rt: dict[str, Any] = {"thought": turn.thought}
        if isinstance(turn.action, ToolCall):
            rt["tool_call"] = {
                "name": turn.action.tool_name,
                "arguments": dict(turn.action.arguments),
            }
        else:
            fa = turn.action
            rt["answer"] = program_to_dict(fa.program) if fa.program else fa.raw
        if turn.observation is not None:
            rt["observation"] = {
                "source_tool": turn.observation.source_tool,
                "payload": [dict(p) for p in turn.observation.payload],
            }
        turns.append(rt)
    out: dict[str, Any] = {
        "prompt_id": t.prompt_id,
        "request_text": t.request_text,
        "turns": turns,
        "tool_call_count": t.tool_call_count,
        "protocol_status": t.protocol_status,
    }
    if t.tokens:
        out["tokens"] = [
            {"token": s.token, "logp": s.logp, "decision": s.decision,
             "assistant": s.assistant}
            for s in t.tokens
        ]
    return out


def serialize_trajectory(t: Trajectory) -> str:
    """One log line; key order is fixed so the bytes are stable."""
    return json.dumps(trajectory_to_dict(t), sort_keys=True, separators=(",", ":"))


def read_trajectory_log(path: str) -> list[Trajectory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(parse_trajectory(line))
    return out


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...]

    @property
    def passed(self) -> bool:
        return not self.violations


def validate_program(
    p: PromptReferenceProgram,
    t: Trajectory | Iterable[str],
    max_refs: int = DEFAULT_MAX_REFS,
) -> ValidationReport:
    """Check a final program against the answer rules.

    ``t`` supplies the img_ids that image_search actually returned; a bare
    iterable of ids is accepted too.
    """
    observed = set(t.observed_img_ids() if isinstance(t, Trajectory) else t)
    found: set[str] = set()
    ids = p.ref_ids
    k = len(ids)

    if not p.gen_prompt.strip():
        found.add("empty_prompt")
    if _IMG_ID_RE.search(p.gen_prompt):
        found.add("raw_id_leak")
    if _URL_RE.search(p.gen_prompt):
        found.add("url_leak")
    if not 1 <= k <= max_refs:
        found.add("ref_count_out_of_range")
    if ids != sorted(ids, key=img_sort_key):
        found.add("unsorted_refs")
    if any(i not in observed for i in ids):
        found.add("unknown_img_id")
    # binding is only defined for 1..5 references
    if 1 <= k <= len(ORDINALS):
        used = {ORDINALS.index(m.lower()) + 1 for m in _ORDINAL_RE.findall(p.gen_prompt)}
        if used != set(range(1, k + 1)):
            found.add("ordinal_mismatch")
    return ValidationReport(tuple(sorted(found)))


@dataclass(frozen=True)
class FilterReport:
    keep: bool
    reasons: tuple[str, ...]


_VIOLATION_TO_REASON = {
    "empty_prompt": "unparseable_answer",
    "ordinal_mismatch": "missing_ordinal_wording",
    "raw_id_leak": "url_or_id_leak",
    "url_leak": "url_or_id_leak",
    "ref_count_out_of_range": "invalid_ref_count",
    "unknown_img_id": "invalid_ref_count",
    "unsorted_refs": "invalid_ref_count",
}


def check_hard_filters(
    t: Trajectory,
    max_tool_calls: int = DEFAULT_MAX_TOOL_CALLS,
    max_refs: int = DEFAULT_MAX_REFS,
) -> FilterReport:
    reasons: set[str] = set()
    structural = t.failure_reason
    program = t.program
    if structural == "unparseable_answer" or (
        t.final_answer is not None and program is None
    ):
        reasons.add("unparseable_answer")
    elif structural in {
        "multiple_answers", "no_answer", "answer_not_last",
        "missing_observation", "duplicate_img_id", "count_mismatch",
    }:
        reasons.add("incomplete_loop")
    if not any(c.tool_name == "image_search" for c in t.tool_calls()):
        reasons.add("no_image_search")
    if t.tool_call_count > max_tool_calls:
        reasons.add("over_budget")
    if program is not None:
        if any(s not in SKILLS for s in program.selected_skills):
            reasons.add("invalid_skill_name")
        report = validate_program(program, t, max_refs=max_refs)
        reasons.update(_VIOLATION_TO_REASON[v] for v in report.violations)
    return FilterReport(not reasons, tuple(sorted(reasons)))


# ---------------------------------------------------------------------------
# Duplicate references


@dataclass(frozen=True)
class DedupReport:
    groups: tuple[tuple[str, ...], ...]
    survivors: tuple[str, ...]

    @property
    def duplicate_groups(self) -> tuple[tuple[str, ...], ...]:
        return tuple(g for g in self.groups if len(g) > 1)


def check_duplicates(candidates: Sequence[Mapping[str, Any]]) -> DedupReport:
    """Group candidate images that share any one subject annotation.

    The pairwise relation is closed transitively, so the result is a
    partition; each group keeps the lowest img_id.
    """
    ids = [c["img_id"] for c in candidates]
    parent = list(range(len(ids)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    first_seen: dict[tuple[str, str], int] = {}
    for i, cand in enumerate(candidates):
        ann = cand.get("annotations", cand)
        for f in DEDUP_FIELDS:
            v = ann.get(f)
            if not v:
                continue
            j = first_seen.setdefault((f, v), i)
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)

    buckets: dict[int, list[str]] = {}
    for i, img in enumerate(ids):
        buckets.setdefault(find(i), []).append(img)
    groups = sorted(
        (tuple(sorted(g, key=img_sort_key)) for g in buckets.values()),
        key=lambda g: img_sort_key(g[0]),
    )
    return DedupReport(tuple(groups), tuple(g[0] for g in groups))


def is_img_id(token: str) -> bool:
    return bool(_IMG_ID_FULL_RE.match(token))
