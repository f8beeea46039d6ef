import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from toolevolve.diagnostics import (
    classify_token_effect,
    curves_to_csv,
    export_curves,
    moving_average,
    token_effect_records,
)
from toolevolve.errors import UnnormalizedDistribution


def test_support_example():
    student = {"spatial": 0.527, "shape": 0.3, "layout": 0.173}
    teacher = {"spatial": 0.961, "shape": 0.02, "layout": 0.019}
    e = classify_token_effect(student, teacher, "spatial")
    assert e.effect == "support"
    assert e.delta_logp == pytest.approx(math.log(0.961 / 0.527), abs=1e-12)


def test_oppose_example():
    student = {"shape": 0.6, "layout": 0.3, "spatial": 0.1}
    teacher = {"shape": 0.05, "layout": 0.9, "spatial": 0.05}
    e = classify_token_effect(student, teacher, "shape")
    assert e.effect == "oppose" and e.teacher_top1 == "layout" and e.delta_logp < -0.1


def test_identical_is_neutral():
    p = np.array([0.2, 0.5, 0.3])
    assert classify_token_effect(p, p, 1).effect == "neutral"


def test_unnormalized():
    with pytest.raises(UnnormalizedDistribution):
        classify_token_effect([0.5, 0.6], [0.5, 0.5], 0)


@given(st.lists(st.floats(0.01, 1), min_size=2, max_size=6), st.lists(st.floats(0.01, 1), min_size=2, max_size=6),
       st.integers(0, 5))
def test_classify_total(a, b, tok):
    n = min(len(a), len(b))
    s, t = np.array(a[:n]), np.array(b[:n])
    e = classify_token_effect(s / s.sum(), t / t.sum(), tok % n)
    assert e.effect in ("oppose", "support", "neutral")
    assert token_effect_records([e])[0]["effect"] == e.effect


def test_constant_reward_curve():
    rows = export_curves([{"step": i, "mean_reward": 0.5} for i in range(50)])
    assert len(rows) == 50
    assert all(r["mean_reward_ma"] == 0.5 for r in rows)


def test_partial_window():
    vals = [float(i) for i in range(10)]
    assert moving_average(vals, 25) == [np.mean(vals[: i + 1]) for i in range(10)]
    assert moving_average([1.0, 2.0, 3.0, 4.0], 2) == [1.0, 1.5, 2.5, 3.5]


def test_empty_history():
    assert export_curves([]) == []
    assert curves_to_csv([]) == ""


def test_csv_header_and_rows():
    text = curves_to_csv(export_curves([{"step": 0, "mean_reward": 0.25, "sdl_loss": 0.0}]))
    lines = text.splitlines()
    assert lines[0] == "step,mean_reward,sdl_loss,grpo_loss,buffer_size,comparisons_mined,mean_reward_ma"
    assert lines[1].startswith("0,0.25,0.0")
