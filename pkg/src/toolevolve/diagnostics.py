"""Teacher/student token analysis and training-curve export."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import UnnormalizedDistribution

ETA = 0.1  # nats, oppose threshold on delta log p
ETA_PRIME = 0.01  # probability margin for support
MA_WINDOW = 25
CURVE_FIELDS = ("step", "mean_reward", "sdl_loss", "grpo_loss", "buffer_size", "comparisons_mined")


@dataclass(frozen=True)
class TokenEffect:
    token: Any
    p_student: float
    p_teacher: float
    student_top1: Any
    teacher_top1: Any
    effect: str  # oppose | support | neutral
    delta_logp: float


def _as_dist(dist) -> tuple[list, np.ndarray]:
    if isinstance(dist, Mapping):
        keys = list(dist)
        probs = np.array([float(dist[k]) for k in keys])
    else:
        probs = np.asarray(dist, dtype=float)
        keys = list(range(probs.size))
    if abs(probs.sum() - 1.0) > 1e-6 or np.any(probs < 0):
        raise UnnormalizedDistribution(f"probabilities sum to {probs.sum()!r}")
    return keys, probs


def classify_token_effect(student_dist, teacher_dist, sampled_token, eta: float = ETA, eta_prime: float = ETA_PRIME) -> TokenEffect:
    """Classify how the experience-patched teacher treats a sampled token.

    Distributions are arrays indexed by token id or mappings token -> prob.
    """
    s_keys, s_p = _as_dist(student_dist)
    t_keys, t_p = _as_dist(teacher_dist)
    s_top, t_top = s_keys[int(np.argmax(s_p))], t_keys[int(np.argmax(t_p))]
    ps = float(s_p[s_keys.index(sampled_token)]) if sampled_token in s_keys else 0.0
    pt = float(t_p[t_keys.index(sampled_token)]) if sampled_token in t_keys else 0.0
    delta = _log(pt) - _log(ps)
    if t_top != sampled_token and delta < -eta:
        effect = "oppose"
    elif t_top == s_top == sampled_token and pt > ps + eta_prime:
        effect = "support"
    else:
        effect = "neutral"
    return TokenEffect(sampled_token, ps, pt, s_top, t_top, effect, delta)


def _log(p: float) -> float:
    return math.log(p) if p > 0 else -math.inf


def token_effect_records(effects: Sequence[TokenEffect]) -> list[dict[str, Any]]:
    return [asdict(e) for e in effects]


def moving_average(values: Sequence[float], window: int = MA_WINDOW) -> list[float]:
    """Trailing mean; the window shrinks to the available steps at the start."""
    return [float(np.mean(values[max(0, i + 1 - window) : i + 1])) for i in range(len(values))]


def export_curves(step_records: Sequence[Mapping[str, Any]], window: int = MA_WINDOW) -> list[dict[str, Any]]:
    """One row per step with the curve fields plus ``mean_reward_ma``."""
    rows = [{k: rec.get(k, 0) for k in CURVE_FIELDS} for rec in step_records]
    ma = moving_average([float(r["mean_reward"]) for r in rows], window)
    for r, m in zip(rows, ma):
        r["mean_reward_ma"] = m
    return rows


def curves_to_csv(rows: Sequence[Mapping[str, Any]]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=[*CURVE_FIELDS, "mean_reward_ma"], lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
