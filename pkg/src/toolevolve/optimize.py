"""GRPO surrogate, SDL distillation loss and their analytic gradients.

All losses are written as functions of the per-token student log-probs
``lp`` of the sampled tokens; :func:`toolevolve.policy.logp_gradient` chains
``d loss / d lp`` back to the weight matrix. Teacher scorings, old log-probs
and SDL token masks are carried in the batch as constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import GroupTooSmall, LengthMismatch, ShapeMismatch
from .policy import PolicyParameters, TokenBatch, logp_gradient, score_tokens

DEFAULT_EPS_ADV = 1e-4


def k3(ell):
    """Sampled-token reverse-KL estimator exp(-l) - 1 + l."""
    ell = np.asarray(ell, dtype=float)
    # expm1 keeps the value non-negative near l = 0
    out = np.expm1(-ell) + ell
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class GrpoConfig:
    eps_low: float = 0.20
    eps_high: float = 0.28
    beta_ref: float = 1e-3
    # per-token penalty hook: (lp, lp_ref) -> (penalty, d penalty / d lp)
    ref_kl: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]] | None = None
    aggregation: str = "seq-mean-token-sum"

    def __post_init__(self) -> None:
        if not (0 < self.eps_low < 1 and 0 < self.eps_high < 1):
            raise ValueError("clip ratios must lie in (0, 1)")
        if self.aggregation != "seq-mean-token-sum":
            raise ValueError(f"unsupported aggregation {self.aggregation!r}")


@dataclass(frozen=True)
class SdlConfig:
    rho_max: float = 2.0
    ell_clamp: tuple[float, float] = (-10.0, 10.0)
    top_k_frac: float = 0.1
    lambda_sdl: float = 2.0
    token_cap: float | None = None  # None -> k3(lower clamp), inactive after clamping

    def __post_init__(self) -> None:
        if self.rho_max < 1:
            raise ValueError("rho_max must be >= 1")
        if not 0 < self.top_k_frac <= 1:
            raise ValueError("top_k_frac must lie in (0, 1]")
        lo, hi = self.ell_clamp
        if not lo < 0 < hi:
            raise ValueError("ell_clamp must bracket zero")

    @property
    def c_tok(self) -> float:
        return k3(self.ell_clamp[0]) if self.token_cap is None else self.token_cap


@dataclass(frozen=True)
class AdvantageSet:
    rewards: tuple[float, ...]
    advantages: tuple[float, ...]
    epsilon_adv: float = DEFAULT_EPS_ADV


def group_advantages(rewards: Sequence[float], eps: float = DEFAULT_EPS_ADV) -> AdvantageSet:
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise GroupTooSmall(f"need at least 2 rewards, got {r.size}")
    if np.all(r == r[0]):
        # the float mean of equal values can miss them by an ulp
        a = np.zeros_like(r)
    else:
        a = (r - r.mean()) / (r.std() + eps)
    return AdvantageSet(tuple(r.tolist()), tuple(a.tolist()), eps)


def _same_length(*arrays: np.ndarray) -> None:
    if len({a.shape for a in arrays}) > 1:
        raise LengthMismatch("per-token arrays must have equal length")


def grpo_token_terms(logp_new, logp_old, advantage: float, cfg: GrpoConfig = GrpoConfig()) -> np.ndarray:
    """Per-token clipped surrogate min(u A, clip(u) A); the loss is its negative."""
    return _grpo_terms(np.asarray(logp_new, float), np.asarray(logp_old, float), advantage, cfg)[0]


def _grpo_terms(lp, lp_old, adv, cfg):
    _same_length(lp, lp_old)
    u = np.exp(lp - lp_old)
    unclipped = u * adv
    clipped = np.clip(u, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high) * adv
    terms = np.minimum(unclipped, clipped)
    # d term / d lp: u A on the unclipped branch, zero where the clip binds
    dterms = np.where(unclipped <= clipped, unclipped, 0.0)
    return terms, dterms


def select_sdl_tokens(gaps, decision_mask, frac: float = 0.1) -> np.ndarray:
    """Keep the ceil(frac * n) largest-gap decision tokens (at least one)."""
    gaps = np.asarray(gaps, dtype=float)
    dm = np.asarray(decision_mask, dtype=bool)
    _same_length(gaps, dm)
    out = np.zeros(gaps.shape, dtype=float)
    idx = np.flatnonzero(dm)
    if idx.size == 0:
        return out
    # round first so 0.1 * 30 does not ceil to 4
    keep = max(1, math.ceil(round(frac * idx.size, 9)))
    order = np.lexsort((idx, -gaps[idx]))
    out[idx[order[:keep]]] = 1.0
    return out


def sdl_terms(lp, lp_teacher, lp_old, cfg: SdlConfig = SdlConfig()):
    """Per-token min(rho k3(l), c_tok) and its derivative in the student log-prob."""
    lp, lp_teacher, lp_old = (np.asarray(a, dtype=float) for a in (lp, lp_teacher, lp_old))
    _same_length(lp, lp_teacher, lp_old)
    lo, hi = cfg.ell_clamp
    raw = lp - lp_teacher
    ell = np.clip(raw, lo, hi)
    dell = ((raw > lo) & (raw < hi)).astype(float)
    rho_raw = np.exp(lp - lp_old)
    rho = np.minimum(rho_raw, cfg.rho_max)
    drho = np.where(rho_raw < cfg.rho_max, rho_raw, 0.0)
    kk = np.expm1(-ell) + ell
    val = rho * kk
    capped = val >= cfg.c_tok
    terms = np.where(capped, cfg.c_tok, val)
    dterms = np.where(capped, 0.0, drho * kk + rho * -np.expm1(-ell) * dell)
    return terms, dterms


def sdl_loss(lp_student, lp_teacher, lp_old, sdl_mask, cfg: SdlConfig = SdlConfig()) -> tuple[float, np.ndarray]:
    """Masked token mean of the SDL terms and its gradient in ``lp_student``.

    Returns ``(0.0, zeros)`` when the mask is empty, so rows without
    retrieved experience contribute nothing.
    """
    mask = np.asarray(sdl_mask, dtype=float)
    lp_student = np.asarray(lp_student, dtype=float)
    _same_length(lp_student, mask)
    total = mask.sum()
    if total == 0:
        return 0.0, np.zeros_like(lp_student)
    terms, dterms = sdl_terms(lp_student, lp_teacher, lp_old, cfg)
    return float(np.sum(mask * terms) / total), mask * dterms / total


@dataclass
class SequenceData:
    """One sampled sequence with everything the objective treats as constant."""

    contexts: np.ndarray
    tokens: np.ndarray
    mask: np.ndarray
    logp_old: np.ndarray
    advantage: float
    legal: np.ndarray | None = None
    decision: np.ndarray | None = None
    logp_teacher: np.ndarray | None = None
    sdl_mask: np.ndarray | None = None
    logp_ref: np.ndarray | None = None

    def batch(self) -> TokenBatch:
        return TokenBatch(self.contexts, self.tokens, self.mask, self.legal)

    @property
    def has_teacher(self) -> bool:
        return self.logp_teacher is not None and self.sdl_mask is not None


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    grpo_loss: float
    sdl_loss: float
    sdl_tokens: int
    extras: dict = field(default_factory=dict)


def _stack(seqs: Sequence[SequenceData], vocab_size: int) -> tuple[TokenBatch, list[slice]]:
    slices, start = [], 0
    for s in seqs:
        slices.append(slice(start, start + len(s.tokens)))
        start += len(s.tokens)
    if start == 0:
        return TokenBatch(np.zeros((0, 0)), np.zeros(0), np.zeros(0)), slices
    legal = None
    if any(s.legal is not None for s in seqs):
        legal = np.concatenate([
            s.legal if s.legal is not None else np.ones((len(s.tokens), vocab_size), bool)
            for s in seqs if len(s.tokens)
        ])
    return TokenBatch(
        np.concatenate([s.contexts for s in seqs if len(s.tokens)]),
        np.concatenate([s.tokens for s in seqs]),
        np.concatenate([s.mask for s in seqs]),
        legal,
    ), slices


def combined_loss(
    params: PolicyParameters,
    seqs: Sequence[SequenceData],
    grpo_cfg: GrpoConfig = GrpoConfig(),
    sdl_cfg: SdlConfig = SdlConfig(),
    use_grpo: bool = True,
) -> LossResult:
    """L_GRPO + lambda_SDL * L_SDL with its analytic weight gradient.

    GRPO terms are summed within each sequence and averaged over sequences.
    SDL terms are averaged over all selected tokens of the batch. Teacher
    log-probs are constants, so the SDL gradient flows through the student
    scoring only.
    """
    if not seqs:
        raise ValueError("empty batch")
    batch, slices = _stack(seqs, params.vocab_size)
    if len(batch) == 0:
        z = np.zeros_like(params.weights)
        return LossResult(0.0, z, 0.0, 0.0, 0)
    lp = score_tokens(params, batch)
    dlp = np.zeros_like(lp)
    n_seq = len(seqs)

    grpo = 0.0
    if use_grpo:
        for s, sl in zip(seqs, slices):
            terms, dterms = _grpo_terms(lp[sl], np.asarray(s.logp_old, float), s.advantage, grpo_cfg)
            grpo -= float(np.sum(s.mask * terms)) / n_seq
            dlp[sl] -= s.mask * dterms / n_seq
            if grpo_cfg.ref_kl is not None and s.logp_ref is not None:
                pen, dpen = grpo_cfg.ref_kl(lp[sl], np.asarray(s.logp_ref, float))
                grpo += grpo_cfg.beta_ref * float(np.sum(s.mask * pen)) / n_seq
                dlp[sl] += grpo_cfg.beta_ref * s.mask * dpen / n_seq

    sdl, n_sdl = 0.0, 0
    if sdl_cfg.lambda_sdl != 0:
        zeros = np.zeros_like(lp)
        teacher, old, smask = zeros.copy(), zeros.copy(), zeros.copy()
        for s, sl in zip(seqs, slices):
            old[sl] = s.logp_old
            if s.has_teacher:
                teacher[sl] = s.logp_teacher
                smask[sl] = np.asarray(s.sdl_mask, float) * s.mask
        n_sdl = int(smask.sum())
        sdl, dsdl = sdl_loss(lp, teacher, old, smask, sdl_cfg)
        dlp += sdl_cfg.lambda_sdl * dsdl

    value = grpo + sdl_cfg.lambda_sdl * sdl
    return LossResult(value, logp_gradient(params, batch, dlp), grpo, sdl, n_sdl)


def finite_diff_gradient(loss_fn: Callable, params, h: float = 1e-5):
    """Coordinate-wise central differences.

    ``params`` may be an array (``loss_fn`` takes an array) or
    :class:`PolicyParameters` (``loss_fn`` takes parameters).
    """
    wrap = isinstance(params, PolicyParameters)
    x = np.array(params.weights if wrap else params, dtype=float)
    f = (lambda v: loss_fn(params.with_weights(v))) if wrap else loss_fn
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(x.copy()))
        flat[i] = orig - h
        down = float(f(x.copy()))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def apply_step(params, gradient: np.ndarray, learning_rate: float):
    """Plain gradient descent: params - lr * gradient."""
    w = params.weights if isinstance(params, PolicyParameters) else np.asarray(params, float)
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != w.shape:
        raise ShapeMismatch(f"gradient {gradient.shape} vs params {w.shape}")
    new = w - learning_rate * gradient
    return params.with_weights(new) if isinstance(params, PolicyParameters) else new
