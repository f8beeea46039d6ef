"""Deterministic mock world, tool execution and rollout sampling.

World fixture (JSON)::

    {
      "name": "snooker_world",
      "facts":  {"<query key>": "<fact snippet>", ...},
      "images": {"<query key>": [{"img_id": "IMG_001", "title": "...",
                                  "cached_path": "...", "source_tag": "...",
                                  "annotations": {"main_person": ..., "main_object": ...,
                                                  "scene_moment": ..., "venue": ...},
                                  "relevance": ["..."]}, ...]},
      "skills": {"<skill name>": "<guidance text>", ...},
      "prompts": [{"prompt_id": "p01", "request_text": "...",
                   "ground_truth": {"required_fact_key": "...",
                                    "required_fact_token": "...",
                                    "correct_img_ids": ["IMG_001"],
                                    "required_skills": ["spatial_layout"],
                                    "required_text_token": "147",
                                    "request_nouns": ["snooker", ...]}}]
    }

Queries match keys by token-set Jaccard overlap (best match, at least 0.5).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from typing import Any, Mapping, Protocol, Sequence

import numpy as np

from .errors import BudgetExhausted, FixtureInvalid, GroupTooSmall, UnknownSkill
from .policy import FeatureLayout, PolicyParameters, Vocabulary, sample_action
from .protocol import (
    DEFAULT_MAX_REFS,
    DEFAULT_MAX_TOOL_CALLS,
    ORDINALS,
    SKILLS,
    TOOLS,
    FinalAnswer,
    Observation,
    PromptReferenceProgram,
    ReferenceSelection,
    SampledToken,
    ToolCall,
    Trajectory,
    Turn,
    check_hard_filters,
    failed_status,
    img_sort_key,
    is_img_id,
    ordinal_phrase,
)
from .reward import Judge, RenderedOutcome, RewardReport, score_trajectory

MATCH_THRESHOLD = 0.5
_TOKEN_RE = re.compile(r"[a-z0-9_]+")
_QUOTED_RE = re.compile(r"['\"‘“]([^'\"’”]+)['\"’”]")


def query_tokens(text: str) -> frozenset[str]:
    return frozenset(_TOKEN_RE.findall(" ".join(text.lower().split())))


def jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


def best_key(query: str, keys: Sequence[str]) -> str | None:
    q = query_tokens(query)
    best, best_sim = None, -1.0
    for k in sorted(keys):
        s = jaccard(q, query_tokens(k))
        if s > best_sim:
            best, best_sim = k, s
    return best if best_sim >= MATCH_THRESHOLD else None


# ---------------------------------------------------------------------------
# World


@dataclass(frozen=True)
class GroundTruthSpec:
    required_fact_key: str | None
    required_fact_token: str | None
    correct_img_ids: tuple[str, ...]
    required_skills: tuple[str, ...] = ()
    required_text_token: str | None = None
    request_nouns: tuple[str, ...] = ()


@dataclass(frozen=True)
class PromptSpec:
    prompt_id: str
    request_text: str
    ground_truth: GroundTruthSpec


@dataclass
class World:
    name: str
    facts: dict[str, str]
    images: dict[str, list[dict[str, Any]]]
    skills: dict[str, str]
    prompts: list[PromptSpec]

    @property
    def ground_truth(self) -> dict[str, GroundTruthSpec]:
        return {p.prompt_id: p.ground_truth for p in self.prompts}

    def prompt(self, prompt_id: str) -> PromptSpec:
        for p in self.prompts:
            if p.prompt_id == prompt_id:
                return p
        raise KeyError(prompt_id)

    @cached_property
    def image_index(self) -> dict[str, dict[str, Any]]:
        return {rec["img_id"]: rec for recs in self.images.values() for rec in recs}

    @cached_property
    def space(self) -> "ActionSpace":
        return ActionSpace(self)


def _gt_from_dict(d: Mapping[str, Any]) -> GroundTruthSpec:
    return GroundTruthSpec(
        required_fact_key=d.get("required_fact_key"),
        required_fact_token=d.get("required_fact_token"),
        correct_img_ids=tuple(d.get("correct_img_ids", ())),
        required_skills=tuple(d.get("required_skills", ())),
        required_text_token=d.get("required_text_token"),
        request_nouns=tuple(d.get("request_nouns", ())),
    )


def world_from_dict(d: Mapping[str, Any]) -> World:
    try:
        prompts = [
            PromptSpec(p["prompt_id"], p["request_text"], _gt_from_dict(p.get("ground_truth", {})))
            for p in d.get("prompts", [])
        ]
        world = World(
            name=str(d.get("name", "world")),
            facts={str(k): str(v) for k, v in d.get("facts", {}).items()},
            images={str(k): [dict(r) for r in v] for k, v in d.get("images", {}).items()},
            skills={str(k): str(v) for k, v in d.get("skills", {}).items()},
            prompts=prompts,
        )
    except (KeyError, TypeError, AttributeError) as exc:
        raise FixtureInvalid(f"bad fixture structure: {exc}") from exc
    _validate_world(world)
    return world


def _validate_world(w: World) -> None:
    seen: set[str] = set()
    for recs in w.images.values():
        for rec in recs:
            img = rec.get("img_id", "")
            if not is_img_id(img):
                raise FixtureInvalid(f"bad img_id {img!r}")
            if img in seen:
                raise FixtureInvalid(f"img_id {img} appears twice")
            seen.add(img)
    for s in w.skills:
        if s not in SKILLS:
            raise FixtureInvalid(f"unknown skill {s!r} in fixture")
    ids = [p.prompt_id for p in w.prompts]
    if len(set(ids)) != len(ids):
        raise FixtureInvalid("duplicate prompt_id")
    for p in w.prompts:
        gt = p.ground_truth
        if not gt.correct_img_ids:
            raise FixtureInvalid(f"{p.prompt_id}: no correct image")
        for img in gt.correct_img_ids:
            if img not in w.image_index:
                raise FixtureInvalid(f"{p.prompt_id}: missing img_id {img}")
        for s in gt.required_skills:
            if s not in SKILLS or s not in w.skills:
                raise FixtureInvalid(f"{p.prompt_id}: skill {s!r} unavailable")
        if gt.required_fact_key is not None:
            text = w.facts.get(gt.required_fact_key)
            if text is None:
                raise FixtureInvalid(f"{p.prompt_id}: missing fact {gt.required_fact_key!r}")
            if (gt.required_fact_token or "").lower() not in query_tokens(text):
                raise FixtureInvalid(f"{p.prompt_id}: fact token not in fact text")
        if gt.required_text_token is not None and gt.required_text_token not in _quoted(p.request_text):
            raise FixtureInvalid(f"{p.prompt_id}: text token must be quoted in the request")
        _check_reachable(w, p)


def _quoted(text: str) -> list[str]:
    return _QUOTED_RE.findall(text)


def _check_reachable(w: World, p: PromptSpec) -> None:
    """Some two-word query built from request words must reach the required
    fact, and one built from request plus fact words a correct image."""
    gt = p.ground_truth
    req = query_tokens(p.request_text)

    def reachable(keys: Sequence[str], ok) -> bool:
        vocab = sorted(req & set().union(*(query_tokens(k) for k in keys))) if keys else []
        for i, a in enumerate(vocab):
            for b in vocab[i + 1 :]:
                k = best_key(f"{a} {b}", keys)
                if k is not None and ok(k):
                    return True
        return False

    if gt.required_fact_key is not None:
        if not reachable(list(w.facts), lambda k: k == gt.required_fact_key):
            raise FixtureInvalid(f"{p.prompt_id}: required fact unreachable from request words")
        # image queries may also use words of facts already found
        req = req | query_tokens(w.facts[gt.required_fact_key])
    correct = set(gt.correct_img_ids)
    if not reachable(list(w.images), lambda k: any(r["img_id"] in correct for r in w.images[k])):
        raise FixtureInvalid(f"{p.prompt_id}: no correct image reachable from request words")


def load_world(path: str) -> World:
    """Load a fixture file; ``"snooker_world"`` names the bundled fixture."""
    try:
        if path in BUNDLED_WORLDS:
            text = resources.files("toolevolve").joinpath(f"data/{path}.json").read_text("utf-8")
        else:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
    except OSError as exc:
        raise FixtureInvalid(f"cannot read fixture {path}: {exc}") from exc
    if not text.strip():
        return world_from_dict({})
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FixtureInvalid(f"fixture is not JSON: {exc}") from exc
    if not isinstance(data, Mapping):
        raise FixtureInvalid("fixture must be an object")
    return world_from_dict(data)


BUNDLED_WORLDS = ("snooker_world",)


# ---------------------------------------------------------------------------
# Tools


@dataclass
class BudgetState:
    """Per-rollout tool state: call budget and img_ids already handed out."""

    cap: int = DEFAULT_MAX_TOOL_CALLS
    used: int = 0
    seen_img_ids: set[str] = field(default_factory=set)

    @property
    def remaining(self) -> int:
        return self.cap - self.used

    @property
    def exhausted(self) -> bool:
        return self.used >= self.cap


def execute_tool(w: World, c: ToolCall, budget: BudgetState, top_k: int = 5) -> Observation:
    if budget.exhausted:
        raise BudgetExhausted(f"tool budget of {budget.cap} calls used up")
    if c.tool_name == "query_knowledge":
        skill = c.arguments.get("skill_name")
        if skill not in w.skills:
            raise UnknownSkill(str(skill))
        budget.used += 1
        return Observation("query_knowledge", ({"skill": skill, "guidance": w.skills[skill]},))

    budget.used += 1
    if c.tool_name == "search":
        payload = []
        for q in c.arguments.get("queries", []):
            k = best_key(q, list(w.facts))
            if k is not None:
                payload.append({"query": q, "key": k, "snippet": w.facts[k]})
        return Observation("search", tuple(payload[:top_k]))

    k = best_key(str(c.arguments.get("query", "")), list(w.images))
    payload = []
    if k is not None:
        for rec in w.images[k]:
            if rec["img_id"] in budget.seen_img_ids:
                continue
            budget.seen_img_ids.add(rec["img_id"])
            payload.append({f: rec[f] for f in ("img_id", "title", "cached_path", "source_tag", "annotations") if f in rec})
            if len(payload) == top_k:
                break
    return Observation("image_search", tuple(payload))


def render_outcome(w: World, program: PromptReferenceProgram) -> RenderedOutcome:
    refs = tuple(w.image_index[i] for i in program.ref_ids if i in w.image_index)
    return RenderedOutcome(program, refs)


# ---------------------------------------------------------------------------
# Action space and rollouts

CONTROL_TOKENS = ("search", "image_search", "query_knowledge", "answer", "end_refs")
ACTION_TOKENS = ("search", "image_search", "query_knowledge", "answer")

SKILL_PHRASES = {
    "spatial_layout": "Lay out the scene in explicit background, midground and foreground layers with frame-relative positions.",
    "aesthetic_drawing": "Control lighting, lens and colour grading for a cinematic composition.",
    "text_rendering": "Render every required text string verbatim on its own line with a fixed anchor.",
    "creative_drawing": "Transfer the requested style while keeping the source structure recognisable.",
    "anatomy_body_coherence": "Keep hands, limbs and faces anatomically coherent.",
    "attribute_binding": "Bind each colour and material to its own object without leakage.",
    "physical_material_consistency": "Keep support, shadows, reflections and materials physically plausible.",
    "quantity_counting": "State the exact count and anchor each instance to its own position.",
}


class ActionSpace:
    """Token vocabulary and slot grammar the toy agent decodes over.

    Slots: ``action`` (tool or answer), ``search_q``/``image_q`` (query
    words from the request, plus observed fact words for image queries),
    ``skill``, ``ref`` (observed img_ids or
    ``end_refs``) and ``ordinal``. Tool names, skill names, img_ids and
    ordinals are the decision tokens SDL may distil on.
    """

    def __init__(self, world: World, n_hist: int = 256, n_guide_hash: int = 32):
        reserved = set(CONTROL_TOKENS) | set(SKILLS) | set(ORDINALS)
        self.fact_words = set().union(*(query_tokens(k) for k in world.facts)) - reserved if world.facts else set()
        self.image_words = set().union(*(query_tokens(k) for k in world.images)) - reserved if world.images else set()
        img_ids = sorted(world.image_index, key=img_sort_key)
        self.vocab = Vocabulary(
            list(CONTROL_TOKENS) + list(SKILLS) + list(ORDINALS)
            + sorted(self.fact_words | self.image_words) + img_ids
        )
        self.layout = FeatureLayout(len(self.vocab), n_hist, n_guide_hash)
        self._masks: dict[Any, np.ndarray] = {}
        self.skill_mask = self.mask_of(SKILLS)
        self.img_token_ids = frozenset(self.vocab.ids(img_ids))

    def mask_of(self, tokens: Sequence[str]) -> np.ndarray:
        key = tuple(tokens)
        m = self._masks.get(key)
        if m is None:
            m = np.zeros(len(self.vocab), dtype=bool)
            m[self.vocab.ids(tokens)] = True
            self._masks[key] = m
        return m

    def request_words(self, request: str, pool: set[str]) -> list[str]:
        return sorted(query_tokens(request) & pool)

    def is_decision_token(self, token: str) -> bool:
        return token in TOOLS or token in SKILLS or token in ORDINALS or is_img_id(token)

    def initial_params(self, seed: int = 0, **kw: Any) -> PolicyParameters:
        return PolicyParameters.initialize(self.layout, seed=seed, **kw)


class Policy(Protocol):
    def act(self, context: np.ndarray, legal: np.ndarray, rng: np.random.Generator) -> tuple[int, float]: ...


class SoftmaxAgent:
    """Samples from :class:`PolicyParameters` at plain contexts."""

    def __init__(self, params: PolicyParameters):
        self.params = params

    def act(self, context, legal, rng):
        return sample_action(self.params, context, rng, legal)


@dataclass(frozen=True)
class RolloutConfig:
    max_tool_calls: int = DEFAULT_MAX_TOOL_CALLS
    max_refs: int = DEFAULT_MAX_REFS
    query_len: int = 2
    top_k: int = 5


@dataclass
class RolloutRecords:
    """Everything needed to re-score the sampled tokens."""

    contexts: np.ndarray
    legal: np.ndarray
    tokens: np.ndarray
    logp: np.ndarray
    decision: np.ndarray
    mask: np.ndarray


class _Decoder:
    def __init__(self, world: World, policy: Policy, prompt: PromptSpec, rng, cfg: RolloutConfig):
        self.w, self.policy, self.prompt, self.rng, self.cfg = world, policy, prompt, rng, cfg
        self.space = world.space
        self.req_keys = ["req:" + t for t in sorted(query_tokens(prompt.request_text))]
        self.state_keys: list[str] = []
        self.rows: list[tuple[np.ndarray, np.ndarray, int, float, bool]] = []
        self.sampled: list[SampledToken] = []

    def sample(self, slot: str, legal_tokens: Sequence[str], extra: Sequence[str] = ()) -> str:
        keys = self.req_keys + self.state_keys + ["slot:" + slot] + list(extra)
        last = next((k[5:] for k in reversed(self.state_keys) if k.startswith("last:")), "none")
        keys.append(f"slot:{slot}|last:{last}")
        x = self.space.layout.plain_features(keys)
        legal = self.space.mask_of(legal_tokens)
        tid, lp = self.policy.act(x, legal, self.rng)
        token = self.space.vocab.tokens[tid]
        decision = self.space.is_decision_token(token)
        self.rows.append((x, legal, tid, lp, decision))
        self.sampled.append(SampledToken(token, lp, decision, True))
        return token

    def sample_query(self, slot: str, pool: list[str]) -> list[str]:
        chosen: list[str] = []
        for _ in range(min(self.cfg.query_len, len(pool))):
            legal = [t for t in pool if t not in chosen]
            chosen.append(self.sample(slot, legal, ["q:" + t for t in chosen]))
        return chosen

    def run(self) -> Trajectory:
        cfg, space = self.cfg, self.space
        budget = BudgetState(cap=cfg.max_tool_calls)
        search_pool = space.request_words(self.prompt.request_text, space.fact_words)
        turns: list[Turn] = []
        observed: list[dict[str, Any]] = []
        facts: list[str] = []
        image_queries: list[str] = []
        skills: list[str] = []

        while True:
            if budget.exhausted:
                turns.append(self.answer_turn(observed, facts, image_queries, skills, forced=True))
                break
            image_pool = space.request_words(" ".join([self.prompt.request_text, *facts]), space.image_words)
            legal = [a for a, ok in (("search", search_pool), ("image_search", image_pool),
                                     ("query_knowledge", True), ("answer", True)) if ok]
            action = self.sample("action", legal, [f"n:{budget.used}"])
            if action == "answer":
                turns.append(self.answer_turn(observed, facts, image_queries, skills, forced=False))
                break
            idx = len(turns)
            if action == "search":
                q = " ".join(self.sample_query("search_q", search_pool))
                call = ToolCall("search", {"queries": [q]}, idx)
                thought = f"I need to verify a fact, so I search for '{q}'."
            elif action == "image_search":
                q = " ".join(self.sample_query("image_q", image_pool))
                image_queries.append(q)
                call = ToolCall("image_search", {"query": q}, idx)
                thought = f"I need a visual reference, so I search images for '{q}'."
            else:
                skill = self.sample("skill", SKILLS)
                call = ToolCall("query_knowledge", {"skill_name": skill}, idx)
                thought = f"The request needs {skill} guidance."
            obs = execute_tool(self.w, call, budget, cfg.top_k)
            turns.append(Turn(thought, call, obs))
            self.state_keys += [f"used:{action}", f"last:{action}"]
            if not obs.payload:
                self.state_keys.append(f"miss:{action}")
            if action == "search":
                for rec in obs.payload:
                    facts.append(rec["snippet"])
                    self.state_keys.append("fact:" + rec["key"])
            elif action == "image_search":
                for rec in obs.payload:
                    observed.append(rec)
                    self.state_keys.append("img:" + rec["img_id"])
            else:
                skills.append(call.arguments["skill_name"])
                self.state_keys.append("skill:" + call.arguments["skill_name"])

        return self.finish(turns, budget)

    def answer_turn(self, observed, facts, image_queries, skills, forced: bool) -> Turn:
        cfg = self.cfg
        ids = [r["img_id"] for r in observed]
        chosen: list[str] = []
        while ids and len(chosen) < cfg.max_refs:
            legal = [i for i in ids if i not in chosen]
            if chosen:
                legal.append("end_refs")
            if not legal:
                break
            tok = self.sample("ref", legal, ["ref:" + c for c in chosen] + [f"nref:{len(chosen)}"])
            if tok == "end_refs":
                break
            chosen.append(tok)
        chosen.sort(key=img_sort_key)
        ordinals: list[str] = []
        for pos in range(1, len(chosen) + 1):
            if pos > len(ORDINALS):
                break
            ordinals.append(self.sample(
                "ordinal", ORDINALS[: len(chosen)],
                [f"ordpos:{pos}", f"nrefs:{len(chosen)}"] + ["ordprev:" + o for o in ordinals],
            ))

        titles = {r["img_id"]: r.get("title", "reference") for r in observed}
        parts = []
        if image_queries:
            parts.append("Depict " + ", ".join(image_queries) + ".")
        parts += [f"Grounded fact: {f}" for f in facts]
        for img, o in zip(chosen, ordinals):
            parts.append(f"Use {ordinal_phrase(ORDINALS.index(o) + 1)} for {titles[img]}.")
        unique_skills = list(dict.fromkeys(skills))
        parts += [SKILL_PHRASES[s] for s in unique_skills]
        if "text_rendering" in unique_skills:
            parts += [f"Display the text '{t}' exactly." for t in _quoted(self.prompt.request_text)]
        program = PromptReferenceProgram(
            gen_prompt=" ".join(parts),
            reference_images=tuple(ReferenceSelection(i, titles[i]) for i in chosen),
            selected_skills=tuple(unique_skills),
            rationale=f"{len(facts)} facts, {len(chosen)} references, {len(unique_skills)} skills.",
        )
        thought = "FINAL STEP reached; answering with what I have." if forced else "I have enough to write the program."
        return Turn(thought, FinalAnswer(program, None))

    def finish(self, turns: list[Turn], budget: BudgetState) -> Trajectory:
        traj = Trajectory(
            prompt_id=self.prompt.prompt_id,
            request_text=self.prompt.request_text,
            turns=turns,
            tool_call_count=budget.used,
            tokens=self.sampled,
        )
        report = check_hard_filters(traj, self.cfg.max_tool_calls, self.cfg.max_refs)
        if not report.keep:
            traj.protocol_status = failed_status(report.reasons[0])
        V = len(self.space.vocab)
        W = self.space.layout.width
        n = len(self.rows)
        traj.records = RolloutRecords(
            contexts=np.array([r[0] for r in self.rows]) if n else np.zeros((0, W)),
            legal=np.array([r[1] for r in self.rows]) if n else np.zeros((0, V), dtype=bool),
            tokens=np.array([r[2] for r in self.rows], dtype=np.int64),
            logp=np.array([r[3] for r in self.rows], dtype=float),
            decision=np.array([r[4] for r in self.rows], dtype=bool),
            mask=np.ones(n),
        )
        return traj


def _as_policy(policy: Policy | PolicyParameters) -> Policy:
    return SoftmaxAgent(policy) if isinstance(policy, PolicyParameters) else policy


def run_rollout(
    w: World,
    policy: Policy | PolicyParameters,
    prompt_id: str,
    rng_seed: int,
    config: RolloutConfig | None = None,
) -> Trajectory:
    """Sample one trajectory; (world, params, prompt, seed) fix every byte."""
    rng = np.random.default_rng(rng_seed)
    return _Decoder(w, _as_policy(policy), w.prompt(prompt_id), rng, config or RolloutConfig()).run()


@dataclass
class RolloutGroup:
    prompt_id: str
    trajectories: list[Trajectory]
    rewards: list[RewardReport]
    seed: int

    @property
    def mixed(self) -> list[float]:
        return [r.mixed for r in self.rewards]


def run_group(
    w: World,
    policy: Policy | PolicyParameters,
    prompt_id: str,
    K: int = 6,
    seed: int = 0,
    judge: Judge | None = None,
    alpha: float = 0.5,
    config: RolloutConfig | None = None,
) -> RolloutGroup:
    if K < 2:
        raise GroupTooSmall(f"group size {K} < 2")
    gt = w.prompt(prompt_id).ground_truth
    policy = _as_policy(policy)
    trajs, rewards = [], []
    for i in range(K):
        t = run_rollout(w, policy, prompt_id, seed + i, config)
        outcome = render_outcome(w, t.program) if t.program is not None else None
        trajs.append(t)
        rewards.append(score_trajectory(t, gt, outcome, judge, alpha))
    return RolloutGroup(prompt_id, trajs, rewards, seed)
