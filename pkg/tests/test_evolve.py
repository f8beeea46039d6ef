import json
import os

import numpy as np
import pytest

from toolevolve.errors import ConfigError
from toolevolve.evolve import (
    RunConfig,
    init_state,
    load_checkpoint,
    metrics_jsonl,
    run_evolution,
    save_checkpoint,
)
from toolevolve.experience import dump_snapshot


def _cfg(**kw):
    base = dict(steps=6, train_batch_size=4, seed=3)
    base.update(kw)
    return RunConfig(**base)


def test_defaults_follow_training_table():
    c = RunConfig()
    assert (c.n, c.train_batch_size, c.GEN_REWARD_TEXT_COEF) == (6, 8, 0.5)
    assert (c.EXPERIENCE_MIN_REWARD_GAP, c.EXPERIENCE_BUFFER_CAPACITY, c.EXPERIENCE_MAX_COMPARISONS) == (0.2, 500, 8)
    assert (c.SDL_TOP_K_FRAC, c.sdl_is_clip, c.sdl_loss_coef) == (0.1, 2.0, 2.0)
    assert (c.clip_ratio_low, c.clip_ratio_high, c.temperature) == (0.2, 0.28, 0.7)
    assert c.EXPERIENCE_MIN_RETRIEVAL_SIM == 0.84


def test_config_mapping():
    c = RunConfig.from_mapping({"actor.sdl_loss_coef": 1.0, "n": 4, "steps": 3.0})
    assert c.sdl_loss_coef == 1.0 and c.n == 4 and c.steps == 3
    for bad in ({"bogus": 1}, {"n": 1}, {"n": 2.5}, {"use_kl_loss": "yes"}, {"clip_ratio_low": 1.5}):
        with pytest.raises(ConfigError):
            RunConfig.from_mapping(bad)


def test_config_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("steps: 2\nSDL_TOP_K_FRAC: 0.2\n")
    assert RunConfig.from_file(str(p)).SDL_TOP_K_FRAC == 0.2
    p.write_text("- not a mapping\n")
    with pytest.raises(ConfigError):
        RunConfig.from_file(str(p))
    with pytest.raises(ConfigError):
        RunConfig.from_file(str(tmp_path / "missing.yaml"))


def test_zero_steps_unchanged():
    cfg = _cfg(steps=0)
    init = init_state(cfg)
    state = run_evolution(cfg)
    assert state.step == 0 and state.history == []
    assert np.array_equal(state.params.weights, init.params.weights)


def test_step_zero_has_no_sdl():
    state = run_evolution(_cfg(steps=1))
    h = state.history[0]
    assert h["sdl_loss"] == 0.0 and h["sdl_tokens"] == 0 and h["retrieval_hits"] == 0


def test_short_run_invariants():
    state = run_evolution(_cfg(steps=8))
    assert state.patched_context_samples == 0
    assert all(h["comparisons_mined"] <= min(8, state.config.train_batch_size) for h in state.history)
    assert any(h["sdl_tokens"] > 0 for h in state.history)
    assert len(state.buffer) == sum(h["comparisons_mined"] for h in state.history)


def test_lambda_zero_matches_grpo_baseline():
    a = run_evolution(_cfg(steps=4, sdl_loss_coef=0.0))
    assert all(h["sdl_loss"] == 0.0 for h in a.history)
    b = run_evolution(_cfg(steps=4, sdl_loss_coef=0.0))
    assert metrics_jsonl(a.history) == metrics_jsonl(b.history)


def test_rerun_bit_identical():
    a = run_evolution(_cfg())
    b = run_evolution(_cfg())
    assert metrics_jsonl(a.history) == metrics_jsonl(b.history)
    assert dump_snapshot(a.buffer) == dump_snapshot(b.buffer)
    assert np.array_equal(a.params.weights, b.params.weights)


def test_checkpoint_round_trip(tmp_path):
    state = run_evolution(_cfg(steps=3))
    save_checkpoint(state, str(tmp_path))
    back = load_checkpoint(str(tmp_path))
    assert np.array_equal(back.params.weights, state.params.weights)
    assert dump_snapshot(back.buffer) == dump_snapshot(state.buffer)
    assert back.rng.bit_generator.state == state.rng.bit_generator.state
    assert (back.step, back.cursor, back.history) == (state.step, state.cursor, state.history)


def test_resume_matches_uninterrupted(tmp_path):
    cfg = _cfg(steps=6)
    full = run_evolution(cfg)
    half = run_evolution(cfg, until=3)
    save_checkpoint(half, str(tmp_path))
    resumed = run_evolution(cfg, state=load_checkpoint(str(tmp_path)))
    assert metrics_jsonl(resumed.history) == metrics_jsonl(full.history)
    assert np.array_equal(resumed.params.weights, full.params.weights)


def test_outputs_written(tmp_path):
    out = tmp_path / "run"
    run_evolution(_cfg(steps=2, out_dir=str(out), checkpoint_every=1))
    for name in ("metrics.jsonl", "curves.csv", "buffer.json", "config.json"):
        assert (out / name).exists()
    assert os.path.exists(out / "checkpoints" / "step_000002" / "state.json")
    rows = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [0, 1]
