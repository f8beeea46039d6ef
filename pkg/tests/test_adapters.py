import numpy as np
import pytest

from toolevolve.adapters import (
    AdapterConfig,
    ExternalEmbedder,
    ExternalJudge,
    ExternalSummarizer,
    RateLimiter,
    ServiceAdapter,
    call_judge,
)
from toolevolve.errors import AdapterTimeout, SchemaViolation, SummarizerFailure
from toolevolve.reward import RubricScores

ALL_ONE = {"faithfulness": 1.0, "visual_correctness": 1.0, "text_accuracy": 1.0, "aesthetics": 1.0,
           "failure_tags": [], "skill_diagnostics": {}}


class FakeClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now

    def sleep(self, dt):
        self.now += dt


def _adapter(transport, **kw):
    clock = FakeClock()
    cfg = AdapterConfig(**kw)
    return ServiceAdapter(transport, cfg, RateLimiter(cfg.rpm_cap, clock, clock.sleep)), clock


def _timeout(_):
    raise TimeoutError


def test_config_validation():
    with pytest.raises(ValueError):
        AdapterConfig(timeout=0)
    with pytest.raises(ValueError):
        AdapterConfig(rpm_cap=0)
    assert AdapterConfig().timeout == 90 and AdapterConfig().rpm_cap == 80


def test_judge_all_ones():
    adapter, _ = _adapter(lambda req: ALL_ONE)
    r = call_judge(adapter, {"program": {}})
    assert (r.faithfulness, r.visual_correctness, r.text_accuracy, r.aesthetics) == (1.0, 1.0, 1.0, 1.0)


def test_judge_off_scale_rejected():
    adapter, _ = _adapter(lambda req: {**ALL_ONE, "visual_correctness": 0.7})
    with pytest.raises(SchemaViolation):
        call_judge(adapter, {})


def test_judge_timeout_fallback():
    builtin = RubricScores(0.5, 0.5, 0.0, 1.0)
    adapter, _ = _adapter(_timeout)
    assert call_judge(adapter, {}, lambda: builtin) == builtin
    strict, _ = _adapter(_timeout, fallback="fail")
    with pytest.raises(AdapterTimeout):
        call_judge(strict, {}, lambda: builtin)


def test_retries_then_succeeds():
    calls = []

    def flaky(req):
        calls.append(req)
        if len(calls) == 1:
            raise TimeoutError
        return ALL_ONE

    adapter, _ = _adapter(flaky, retries=1)
    call_judge(adapter, {})
    assert len(calls) == 2 and calls[0]["timeout"] == 90


def test_rate_limit_window():
    issued = []
    adapter, clock = _adapter(lambda req: issued.append(clock.now) or ALL_ONE, rpm_cap=5)
    for _ in range(23):
        adapter.request({})
        clock.now += 1.0
    times = np.array(issued)
    for t in times:
        assert np.sum((times >= t) & (times < t + 60.0)) <= 5


def test_external_judge_fallback(world):
    from toolevolve.protocol import PromptReferenceProgram, ReferenceSelection

    adapter, _ = _adapter(_timeout)
    p = PromptReferenceProgram("Brecel; use the first reference image.", (ReferenceSelection("IMG_002", ""),), (), "")
    gt = world.ground_truth["p01_snooker_flag"]
    from toolevolve.reward import judge_image

    assert ExternalJudge(adapter).judge_image(p, None, gt) == judge_image(p, None, gt)


def test_external_summarizer_schema(golden):
    from test_experience import _comparison

    c = _comparison(golden, "valid_two_refs", "valid_two_refs")
    good, _ = _adapter(lambda req: {
        "retrieval_key": {"trigger": "t", "source_prompt_summary": "s"},
        "decision_guidance": {"decision_focus": "f", "recommended_tool_plan": [], "search_query_guidance": [],
                              "skill_routing_guidance": [], "reference_selection_guidance": [],
                              "prompt_program_guidance": [], "failure_guards": []},
    })
    assert ExternalSummarizer(good).summarize(c)["retrieval_key"]["trigger"] == "t"
    bad, _ = _adapter(lambda req: {"retrieval_key": {"trigger": 1}})
    with pytest.raises(SummarizerFailure):
        ExternalSummarizer(bad).summarize(c)
    strict, _ = _adapter(_timeout, fallback="fail")
    with pytest.raises(SummarizerFailure):
        ExternalSummarizer(strict).summarize(c)


def test_external_embedder():
    adapter, _ = _adapter(lambda req: {"embedding": [3.0, 4.0]})
    v = ExternalEmbedder(adapter).transform(["hello"])
    assert np.allclose(v, [[0.6, 0.8]])
    zero, _ = _adapter(lambda req: {"embedding": [0.0, 0.0]})
    with pytest.raises(SchemaViolation):
        ExternalEmbedder(zero).transform(["hello"])
    fallback, _ = _adapter(_timeout)
    assert np.allclose(ExternalEmbedder(fallback).transform(["hello"]), ExternalEmbedder().transform(["hello"]))
