"""Rubric judging, KScore aggregation and the mixed training reward.

The built-in judge is rule-based over fixture ground truth so every reward in
the loop is reproducible. Anything with the :class:`Judge` shape can replace
it (see :mod:`toolevolve.adapters` for the external-service adapter).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Mapping, Protocol, Sequence

from .errors import SchemaViolation
from .protocol import (
    PromptReferenceProgram,
    Trajectory,
    check_duplicates,
    validate_program,
)

if TYPE_CHECKING:
    from .environment import GroundTruthSpec

LEVELS = (0.0, 0.5, 1.0)
TEXT_BINS = (0.0, 0.25, 0.5, 0.75, 1.0)
KSCORE_WEIGHTS = {
    "faithfulness": 0.1,
    "visual_correctness": 0.4,
    "text_accuracy": 0.4,
    "aesthetics": 0.1,
}
GEN_REWARD_TEXT_COEF = 0.5

# failure tag emitted when a required skill was never activated
SKILL_FAILURE_TAGS = {
    "spatial_layout": "layout_error",
    "aesthetic_drawing": "weak_aesthetics",
    "text_rendering": "unreadable_text",
    "creative_drawing": "weak_style_transfer",
    "anatomy_body_coherence": "anatomy_error",
    "attribute_binding": "attribute_leak",
    "physical_material_consistency": "material_inconsistency",
    "quantity_counting": "wrong_count",
}

_WORD_RE = re.compile(r"[a-z0-9_]+")


def words(text: str) -> set[str]:
    return set(_WORD_RE.findall(text.lower()))


@dataclass(frozen=True)
class RubricScores:
    faithfulness: float
    visual_correctness: float
    text_accuracy: float
    aesthetics: float
    text_na: bool = False
    failure_tags: tuple[str, ...] = ()
    skill_diagnostics: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in KSCORE_WEIGHTS:
            if getattr(self, name) not in LEVELS:
                raise SchemaViolation(f"{name}={getattr(self, name)!r} is not in {LEVELS}")
        for v in self.skill_diagnostics.values():
            if v not in ("pass", "partial", "fail"):
                raise SchemaViolation(f"skill diagnostic {v!r}")


@dataclass(frozen=True)
class RewardReport:
    rubric: RubricScores
    kscore: float
    text_score: float
    mixed: float
    protocol_failed: bool = False


@dataclass(frozen=True)
class RenderedOutcome:
    """Symbolic stand-in for a generated image: the program plus the fixture
    records its references resolve to."""

    program: PromptReferenceProgram
    references: tuple[Mapping[str, Any], ...] = ()


def compute_kscore(r: RubricScores) -> float:
    """0.1 faithfulness + 0.4 visual + 0.4 text + 0.1 aesthetics; with no
    text requirement the remaining weights are renormalised to sum to one."""
    dims = dict(KSCORE_WEIGHTS)
    if r.text_na:
        del dims["text_accuracy"]
    total = sum(dims.values())
    return sum(w * getattr(r, name) for name, w in dims.items()) / total


def mixed_reward(r_img: float, r_text: float, alpha: float = GEN_REWARD_TEXT_COEF) -> float:
    return (1.0 - alpha) * r_img + alpha * r_text


def snap_to_bin(x: float) -> float:
    return min(TEXT_BINS, key=lambda b: (abs(b - x), b))


def _fact_ok(program: PromptReferenceProgram, gt: "GroundTruthSpec") -> bool:
    if gt.required_fact_token is None:
        return True
    return gt.required_fact_token.lower() in words(program.gen_prompt)


def _refs_ok(program: PromptReferenceProgram, gt: "GroundTruthSpec") -> bool:
    ids = set(program.ref_ids)
    return bool(ids) and ids <= set(gt.correct_img_ids)


def _level(hit: int, total: int) -> float:
    if total == 0 or hit == total:
        return 1.0
    return 0.5 if hit else 0.0


def judge_image(
    program: PromptReferenceProgram,
    outcome: RenderedOutcome | None,
    gt: "GroundTruthSpec",
) -> RubricScores:
    tags: set[str] = set()
    refs_ok = _refs_ok(program, gt)
    fact_ok = _fact_ok(program, gt)
    if not refs_ok:
        tags.add("wrong_reference")
    if not fact_ok:
        tags.add("wrong_fact")
    visual = 1.0 if refs_ok and fact_ok else 0.5 if refs_ok or fact_ok else 0.0

    if outcome is not None and outcome.references:
        if check_duplicates(outcome.references).duplicate_groups:
            tags.add("duplicate_references")

    text_na = gt.required_text_token is None
    text = 0.0
    if not text_na:
        text = 1.0 if gt.required_text_token in program.gen_prompt else 0.0
        if not text:
            tags.add("missing_text")

    nouns = [n.lower() for n in gt.request_nouns]
    covered = words(program.gen_prompt)
    frac = sum(n in covered for n in nouns) / len(nouns) if nouns else 1.0
    faith = 1.0 if frac >= 0.75 else 0.5 if frac >= 0.4 else 0.0
    if faith < 1.0:
        tags.add("weak_request_coverage")

    selected = set(program.selected_skills)
    required = list(gt.required_skills)
    diagnostics = {}
    for s in required:
        diagnostics[s] = "pass" if s in selected else "fail"
        if s not in selected:
            tags.add(SKILL_FAILURE_TAGS[s])
    aesthetics = _level(sum(s in selected for s in required), len(required))

    return RubricScores(
        faithfulness=faith,
        visual_correctness=visual,
        text_accuracy=text,
        aesthetics=aesthetics,
        text_na=text_na,
        failure_tags=tuple(sorted(tags)),
        skill_diagnostics=diagnostics,
    )


def judge_text(
    program: PromptReferenceProgram,
    gt: "GroundTruthSpec",
    observed_img_ids: Sequence[str] | None = None,
) -> float:
    """Program-sufficiency score: fraction of four checks, on the 5-bin grid.

    Checks: grounded fact present, ordinal bindings valid, required skills
    reflected, all references resolvable.
    """
    ids = program.ref_ids
    resolvable = set(observed_img_ids) if observed_img_ids is not None else set(ids)
    report = validate_program(program, resolvable)
    checks = (
        _fact_ok(program, gt),
        "ordinal_mismatch" not in report.violations,
        set(gt.required_skills) <= set(program.selected_skills),
        bool(ids) and all(i in resolvable for i in ids),
    )
    return snap_to_bin(sum(checks) / 4.0)


class Judge(Protocol):
    def judge_image(
        self, program: PromptReferenceProgram, outcome: RenderedOutcome | None,
        gt: "GroundTruthSpec",
    ) -> RubricScores: ...

    def judge_text(
        self, program: PromptReferenceProgram, gt: "GroundTruthSpec",
        observed_img_ids: Sequence[str] | None = None,
    ) -> float: ...


class RuleJudge:
    """Deterministic judge over fixture ground truth."""

    def judge_image(self, program, outcome, gt):
        return judge_image(program, outcome, gt)

    def judge_text(self, program, gt, observed_img_ids=None):
        return judge_text(program, gt, observed_img_ids)


ZERO_RUBRIC = RubricScores(0.0, 0.0, 0.0, 0.0, failure_tags=("protocol_failure",))


def score_trajectory(
    traj: Trajectory,
    gt: "GroundTruthSpec",
    outcome: RenderedOutcome | None = None,
    judge: Judge | None = None,
    alpha: float = GEN_REWARD_TEXT_COEF,
) -> RewardReport:
    """Full reward for one rollout; protocol failures score zero."""
    program = traj.program
    if traj.failed or program is None:
        return RewardReport(ZERO_RUBRIC, 0.0, 0.0, 0.0, protocol_failed=True)
    judge = judge or RuleJudge()
    rubric = judge.judge_image(program, outcome, gt)
    kscore = compute_kscore(rubric)
    text = judge.judge_text(program, gt, traj.observed_img_ids())
    return RewardReport(rubric, kscore, text, mixed_reward(kscore, text, alpha))


def rubric_to_dict(r: RubricScores) -> dict[str, Any]:
    """Judge output record with the field names of the judge template."""
    return {
        "faithfulness": r.faithfulness,
        "visual_correctness": r.visual_correctness,
        "text_accuracy": r.text_accuracy,
        "text_accuracy_na": r.text_na,
        "aesthetics": r.aesthetics,
        "overall": compute_kscore(r),
        "failure_tags": list(r.failure_tags),
        "skill_diagnostics": dict(r.skill_diagnostics),
    }


def rubric_from_dict(d: Mapping[str, Any]) -> RubricScores:
    """Parse a judge record; subscores must already lie on the 3-level scale."""
    try:
        vals = {k: float(d[k]) for k in KSCORE_WEIGHTS}
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaViolation(f"judge record missing or bad subscore: {exc}") from exc
    tags = d.get("failure_tags", [])
    diags = d.get("skill_diagnostics", {})
    if not isinstance(tags, list) or not isinstance(diags, Mapping):
        raise SchemaViolation("failure_tags must be a list, skill_diagnostics a map")
    return RubricScores(
        **vals,
        text_na=bool(d.get("text_accuracy_na", False)),
        failure_tags=tuple(sorted(str(t) for t in tags)),
        skill_diagnostics={str(k): str(v) for k, v in diags.items()},
    )
