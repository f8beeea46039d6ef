"""The self-evolution loop: rollouts, judging, experience, distillation, update."""

from __future__ import annotations

import dataclasses
import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from .environment import RolloutConfig, SoftmaxAgent, World, load_world, run_group
from .errors import ConfigError
from .experience import (
    ExperienceBuffer,
    dump_snapshot,
    embed_prompt,
    guidance_features,
    mine_comparison,
    summarize_bundle,
)
from .optimize import (
    GrpoConfig,
    SdlConfig,
    SequenceData,
    apply_step,
    combined_loss,
    group_advantages,
    select_sdl_tokens,
)
from .policy import PolicyParameters, TokenBatch, params_from_bytes, params_to_bytes, score_tokens
from .diagnostics import curves_to_csv, export_curves


@dataclass
class RunConfig:
    """Run knobs; upper-case and dotted-style names follow the published training table."""

    world: str = "snooker_world"
    steps: int = 200
    seed: int = 0
    n: int = 6
    train_batch_size: int = 8
    GEN_REWARD_TEXT_COEF: float = 0.5
    EXPERIENCE_MIN_REWARD_GAP: float = 0.20
    EXPERIENCE_BUFFER_CAPACITY: int = 500
    EXPERIENCE_MAX_COMPARISONS: int = 8
    EXPERIENCE_MIN_RETRIEVAL_SIM: float = 0.84
    SDL_TOP_K_FRAC: float = 0.1
    sdl_is_clip: float = 2.0
    sdl_loss_coef: float = 2.0
    clip_ratio_low: float = 0.20
    clip_ratio_high: float = 0.28
    use_kl_loss: bool = False
    kl_coef: float = 1e-3
    temperature: float = 0.7
    lr: float = 0.25
    epsilon_adv: float = 1e-4
    max_tool_calls: int = 10
    max_refs: int = 5
    n_hist: int = 256
    n_guide_hash: int = 32
    init_scale: float = 0.01
    guidance_gain: float = 2.0
    checkpoint_every: int = 0
    out_dir: str | None = None

    def __post_init__(self) -> None:
        problems = []
        if self.n < 2:
            problems.append("n must be >= 2")
        if self.train_batch_size < 1:
            problems.append("train_batch_size must be >= 1")
        if self.steps < 0:
            problems.append("steps must be >= 0")
        if not 0 <= self.GEN_REWARD_TEXT_COEF <= 1:
            problems.append("GEN_REWARD_TEXT_COEF must lie in [0, 1]")
        if self.EXPERIENCE_BUFFER_CAPACITY < 1:
            problems.append("EXPERIENCE_BUFFER_CAPACITY must be >= 1")
        if self.temperature <= 0:
            problems.append("temperature must be positive")
        if problems:
            raise ConfigError("; ".join(problems))
        try:
            self.grpo_config()
            self.sdl_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_mapping(cls, d: Mapping[str, Any]) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        # accept the dotted actor prefix used for the SDL coefficient
        d = {k.removeprefix("actor.") if k.startswith("actor.") else k: v for k, v in d.items()}
        unknown = sorted(set(d) - set(fields))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for k, v in d.items():
            default = fields[k].default
            try:
                if isinstance(default, bool):
                    if not isinstance(v, bool):
                        raise TypeError
                    kwargs[k] = v
                elif isinstance(default, int):
                    if isinstance(v, bool) or float(v) != int(v):
                        raise TypeError
                    kwargs[k] = int(v)
                elif isinstance(default, float):
                    kwargs[k] = float(v)
                else:
                    kwargs[k] = None if v is None else str(v)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {k}: {v!r}") from None
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        import yaml

        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh)
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if data is None:
            data = {}
        if not isinstance(data, Mapping):
            raise ConfigError("config must be a mapping")
        return cls.from_mapping(data)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def grpo_config(self) -> GrpoConfig:
        kl = _low_var_kl if self.use_kl_loss else None
        return GrpoConfig(self.clip_ratio_low, self.clip_ratio_high, self.kl_coef, kl)

    def sdl_config(self) -> SdlConfig:
        return SdlConfig(rho_max=self.sdl_is_clip, top_k_frac=self.SDL_TOP_K_FRAC, lambda_sdl=self.sdl_loss_coef)

    def rollout_config(self) -> RolloutConfig:
        return RolloutConfig(max_tool_calls=self.max_tool_calls, max_refs=self.max_refs)


def _low_var_kl(lp: np.ndarray, lp_ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """k3 of the current policy against the reference, per token."""
    d = lp_ref - lp
    return np.exp(d) - 1.0 - d, 1.0 - np.exp(d)


class _AuditedAgent(SoftmaxAgent):
    """Counts any attempt to sample from a patched context (should stay 0)."""

    def __init__(self, params: PolicyParameters, state: "EvolveState"):
        super().__init__(params)
        self.state = state

    def act(self, context, legal, rng):
        if self.params.layout.is_patched(context):
            self.state.patched_context_samples += 1
        return super().act(context, legal, rng)


@dataclass
class EvolveState:
    config: RunConfig
    world: World
    params: PolicyParameters
    buffer: ExperienceBuffer
    rng: np.random.Generator
    step: int = 0
    cursor: int = 0
    history: list[dict[str, Any]] = field(default_factory=list)
    patched_context_samples: int = 0


def init_state(config: RunConfig, world: World | None = None) -> EvolveState:
    world = world or load_world(config.world)
    if not world.prompts:
        raise ConfigError("world has no prompts to train on")
    space = world.space
    if (space.layout.n_hist, space.layout.n_guide_hash) != (config.n_hist, config.n_guide_hash):
        from .environment import ActionSpace

        world.__dict__["space"] = ActionSpace(world, config.n_hist, config.n_guide_hash)
    params = PolicyParameters.initialize(
        world.space.layout, seed=config.seed, init_scale=config.init_scale,
        guidance_gain=config.guidance_gain, temperature=config.temperature,
    )
    buffer = ExperienceBuffer(
        config.EXPERIENCE_BUFFER_CAPACITY, config.EXPERIENCE_MIN_RETRIEVAL_SIM,
        config.EXPERIENCE_MIN_REWARD_GAP, config.EXPERIENCE_MAX_COMPARISONS,
    )
    return EvolveState(config, world, params, buffer, np.random.default_rng(config.seed))


def run_step(state: EvolveState) -> EvolveState:
    cfg, world = state.config, state.world
    space = world.space
    grpo_cfg, sdl_cfg = cfg.grpo_config(), cfg.sdl_config()
    prompts = [world.prompts[(state.cursor + i) % len(world.prompts)] for i in range(cfg.train_batch_size)]
    agent = _AuditedAgent(state.params, state)

    groups = []
    for p in prompts:
        seed = int(state.rng.integers(0, 2**31 - 1))
        groups.append(run_group(world, agent, p.prompt_id, cfg.n, seed, alpha=cfg.GEN_REWARD_TEXT_COEF,
                                config=cfg.rollout_config()))

    # retrieval reads the buffer as it stood at the start of the step
    retrieved = {}
    use_sdl = sdl_cfg.lambda_sdl != 0
    for p in prompts:
        if use_sdl and p.prompt_id not in retrieved:
            retrieved[p.prompt_id] = state.buffer.retrieve(embed_prompt(p.request_text))

    mined = 0
    for g in groups:
        if mined >= state.buffer.max_comparisons_per_step:
            break
        c = mine_comparison(g, state.buffer.delta_min)
        if c is not None:
            state.buffer.insert(summarize_bundle(c))
            mined += 1

    seqs: list[SequenceData] = []
    blocks: dict[int, np.ndarray] = {}
    rewards = []
    fails = 0
    for g in groups:
        adv = group_advantages(g.mixed, cfg.epsilon_adv).advantages
        bundle = retrieved.get(g.prompt_id) if use_sdl else None
        for traj, a, r in zip(g.trajectories, adv, g.rewards):
            rewards.append(r.mixed)
            fails += r.protocol_failed
            rec = traj.records
            if len(rec.tokens) == 0:
                continue
            seq = SequenceData(rec.contexts, rec.tokens, rec.mask, rec.logp, a, rec.legal, rec.decision)
            if bundle is not None:
                block = blocks.get(bundle.insertion_index)
                if block is None:
                    block = blocks[bundle.insertion_index] = guidance_features(bundle, space.vocab, space.layout)
                patched = rec.contexts.copy()
                patched[:, space.layout.n_hist :] = block
                lt = score_tokens(state.params, TokenBatch(patched, rec.tokens, rec.mask, rec.legal))
                seq.logp_teacher = lt
                seq.sdl_mask = select_sdl_tokens(np.abs(lt - rec.logp), rec.decision, sdl_cfg.top_k_frac)
            seqs.append(seq)

    result = combined_loss(state.params, seqs, grpo_cfg, sdl_cfg)
    state.params = apply_step(state.params, result.grad, cfg.lr)
    state.cursor = (state.cursor + cfg.train_batch_size) % len(world.prompts)
    state.history.append({
        "step": state.step,
        "mean_reward": float(np.mean(rewards)),
        "grpo_loss": result.grpo_loss,
        "sdl_loss": result.sdl_loss,
        "sdl_tokens": result.sdl_tokens,
        "buffer_size": len(state.buffer),
        "comparisons_mined": mined,
        "retrieval_hits": sum(b is not None for b in retrieved.values()),
        "protocol_fail_rate": fails / len(rewards),
        "patched_context_samples": state.patched_context_samples,
    })
    state.step += 1
    return state


# ---------------------------------------------------------------------------
# Checkpoints: a directory with params.bin, buffer.json and state.json


def _atomic_write(path: str, data: bytes) -> None:
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(state: EvolveState, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    meta = {
        "config": state.config.to_dict(),
        "step": state.step,
        "cursor": state.cursor,
        "rng": state.rng.bit_generator.state,
        "history": state.history,
        "patched_context_samples": state.patched_context_samples,
    }
    _atomic_write(os.path.join(directory, "params.bin"), params_to_bytes(state.params))
    _atomic_write(os.path.join(directory, "buffer.json"), dump_snapshot(state.buffer).encode("utf-8"))
    # state.json last: its presence marks a complete checkpoint
    _atomic_write(os.path.join(directory, "state.json"), json.dumps(meta, sort_keys=True).encode("utf-8"))


def load_checkpoint(directory: str, world: World | None = None) -> EvolveState:
    with open(os.path.join(directory, "state.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    config = RunConfig.from_mapping(meta["config"])
    state = init_state(config, world)
    with open(os.path.join(directory, "params.bin"), "rb") as fh:
        state.params = params_from_bytes(fh.read())
    with open(os.path.join(directory, "buffer.json"), encoding="utf-8") as fh:
        state.buffer = ExperienceBuffer.from_dict(json.load(fh))
    state.rng.bit_generator.state = meta["rng"]
    state.step, state.cursor = meta["step"], meta["cursor"]
    state.history = meta["history"]
    state.patched_context_samples = meta["patched_context_samples"]
    return state


def metrics_jsonl(history: list[dict[str, Any]]) -> str:
    return "".join(json.dumps(h, sort_keys=True) + "\n" for h in history)


def write_outputs(state: EvolveState, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    _atomic_write(os.path.join(out_dir, "metrics.jsonl"), metrics_jsonl(state.history).encode("utf-8"))
    _atomic_write(os.path.join(out_dir, "curves.csv"), curves_to_csv(export_curves(state.history)).encode("utf-8"))
    _atomic_write(os.path.join(out_dir, "buffer.json"), dump_snapshot(state.buffer).encode("utf-8"))
    _atomic_write(os.path.join(out_dir, "config.json"), json.dumps(state.config.to_dict(), sort_keys=True, indent=1).encode("utf-8"))


def run_evolution(
    config: RunConfig,
    state: EvolveState | None = None,
    world: World | None = None,
    until: int | None = None,
    on_step: Callable[[EvolveState], None] | None = None,
) -> EvolveState:
    """Run (or continue) training up to ``until`` (default ``config.steps``) steps."""
    state = state or init_state(config, world)
    target = config.steps if until is None else until
    out = config.out_dir
    while state.step < target:
        run_step(state)
        if on_step:
            on_step(state)
        if out and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            save_checkpoint(state, os.path.join(out, "checkpoints", f"step_{state.step:06d}"))
    if out:
        write_outputs(state, out)
    return state
