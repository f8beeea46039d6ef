"""Toy context-conditioned softmax policy.

Logits are a single linear read-out of a fixed-width context feature vector::

    z = W @ phi / temperature,   log pi(y | phi) = log_softmax(z)[y]

The feature vector has two blocks. The plain block is a hash-folded bag of
history keys (request words, slot, tools used, observations) plus a constant
bias feature. The guidance block is only filled for the experience-patched
teacher view: a header flag, a vocabulary-aligned signed bag of tokens the
guidance recommends or warns against, and a small hash-folded bag of all
guidance words.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyMask, ShapeMismatch, TokenOutOfVocab

DEFAULT_TEMPERATURE = 0.7


@lru_cache(maxsize=1 << 16)
def stable_hash(key: str) -> int:
    return int.from_bytes(hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest(), "little")


class Vocabulary:
    """Bidirectional token <-> id map with a fixed order."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens = list(dict.fromkeys(tokens))
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise TokenOutOfVocab(token) from None

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]


@dataclass(frozen=True)
class FeatureLayout:
    """Column layout of the context feature vector."""

    vocab_size: int
    n_hist: int = 256
    n_guide_hash: int = 32

    @property
    def plain_width(self) -> int:
        return self.n_hist

    @property
    def header_col(self) -> int:
        return self.n_hist

    @property
    def vocab_slice(self) -> slice:
        return slice(self.n_hist + 1, self.n_hist + 1 + self.vocab_size)

    @property
    def guide_hash_slice(self) -> slice:
        start = self.n_hist + 1 + self.vocab_size
        return slice(start, start + self.n_guide_hash)

    @property
    def width(self) -> int:
        return self.n_hist + 1 + self.vocab_size + self.n_guide_hash

    def plain_features(self, keys: Sequence[str]) -> np.ndarray:
        """Hash-fold history keys into the plain block; column 0 is the bias."""
        x = np.zeros(self.width)
        if keys:
            for k in keys:
                x[1 + stable_hash(k) % (self.n_hist - 1)] += 1.0
            norm = np.linalg.norm(x[1 : self.n_hist])
            x[1 : self.n_hist] /= norm
        x[0] = 1.0
        return x

    def guidance_block(
        self, token_weights: dict[int, float], words: Sequence[str]
    ) -> np.ndarray:
        g = np.zeros(self.width - self.n_hist)
        g[0] = 1.0
        for tid, w in token_weights.items():
            g[1 + tid] = w
        if words and self.n_guide_hash:
            h = np.zeros(self.n_guide_hash)
            for w in words:
                h[stable_hash("g:" + w) % self.n_guide_hash] += 1.0
            g[1 + self.vocab_size :] = h / np.linalg.norm(h)
        return g

    def is_patched(self, x: np.ndarray) -> bool:
        return bool(np.any(x[..., self.n_hist :] != 0.0))

    def strip(self, x: np.ndarray) -> np.ndarray:
        out = np.array(x, dtype=float, copy=True)
        out[..., self.n_hist :] = 0.0
        return out


@dataclass
class PolicyParameters:
    weights: np.ndarray
    layout: FeatureLayout
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.layout.vocab_size, self.layout.width):
            raise ShapeMismatch(
                f"weights {self.weights.shape} vs layout "
                f"{(self.layout.vocab_size, self.layout.width)}"
            )
        if self.layout.vocab_size < 8:
            raise ValueError("vocabulary size must be at least 8")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @property
    def vocab_size(self) -> int:
        return self.layout.vocab_size

    @classmethod
    def initialize(
        cls,
        layout: FeatureLayout,
        seed: int = 0,
        init_scale: float = 0.01,
        guidance_gain: float = 2.0,
        temperature: float = DEFAULT_TEMPERATURE,
    ) -> "PolicyParameters":
        """Small random history weights; the vocabulary-aligned guidance
        columns start at ``guidance_gain * I`` so a patched context shifts
        mass toward the tokens its guidance names."""
        rng = np.random.default_rng(seed)
        w = np.zeros((layout.vocab_size, layout.width))
        w[:, : layout.n_hist] = init_scale * rng.standard_normal((layout.vocab_size, layout.n_hist))
        w[:, layout.vocab_slice] = guidance_gain * np.eye(layout.vocab_size)
        return cls(w, layout, temperature)

    def copy(self) -> "PolicyParameters":
        return PolicyParameters(self.weights.copy(), self.layout, self.temperature)

    def with_weights(self, weights: np.ndarray) -> "PolicyParameters":
        return PolicyParameters(weights, self.layout, self.temperature)


@dataclass
class TokenBatch:
    contexts: np.ndarray
    tokens: np.ndarray
    mask: np.ndarray
    legal: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.contexts = np.atleast_2d(np.asarray(self.contexts, dtype=float))
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=float)
        n = len(self.tokens)
        if self.contexts.shape[0] != n or self.mask.shape != (n,):
            raise ShapeMismatch("contexts, tokens and mask must have equal length")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask entries must be 0 or 1")
        if self.legal is not None:
            self.legal = np.asarray(self.legal, dtype=bool)
            if self.legal.shape[0] != n:
                raise ShapeMismatch("legal mask rows must match tokens")

    def __len__(self) -> int:
        return len(self.tokens)


def _check_tokens(params: PolicyParameters, batch: TokenBatch) -> None:
    if len(batch) and (batch.tokens.min() < 0 or batch.tokens.max() >= params.vocab_size):
        raise TokenOutOfVocab(f"token ids must lie in [0, {params.vocab_size})")
    if batch.contexts.shape[1] != params.layout.width:
        raise ShapeMismatch(
            f"context width {batch.contexts.shape[1]} != {params.layout.width}"
        )


def log_softmax_matrix(
    params: PolicyParameters, contexts: np.ndarray, legal: np.ndarray | None = None
) -> np.ndarray:
    """Row-wise log-probabilities over the whole vocabulary (illegal -> -inf)."""
    z = np.atleast_2d(contexts) @ params.weights.T / params.temperature
    if legal is not None:
        z = np.where(legal, z, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    return z - (zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)))


def score_tokens(params: PolicyParameters, batch: TokenBatch) -> np.ndarray:
    """Exact per-token log pi(token | context)."""
    _check_tokens(params, batch)
    if not len(batch):
        return np.zeros(0)
    lp = log_softmax_matrix(params, batch.contexts, batch.legal)
    return lp[np.arange(len(batch)), batch.tokens]


def logp_gradient(
    params: PolicyParameters, batch: TokenBatch, dlogp: np.ndarray
) -> np.ndarray:
    """Chain rule from per-token d loss / d log p to d loss / d W."""
    if not len(batch):
        return np.zeros_like(params.weights)
    lp = log_softmax_matrix(params, batch.contexts, batch.legal)
    probs = np.exp(lp)
    g = -probs * dlogp[:, None]
    g[np.arange(len(batch)), batch.tokens] += dlogp
    g /= params.temperature
    return g.T @ batch.contexts


def sample_action(
    params: PolicyParameters,
    context: np.ndarray,
    rng: np.random.Generator,
    legal: np.ndarray | None = None,
) -> tuple[int, float]:
    """Inverse-CDF draw from the tempered softmax at a plain context."""
    if params.layout.is_patched(context):
        raise ValueError("the sampling path accepts plain contexts only")
    lp = log_softmax_matrix(params, context[None, :], None if legal is None else legal[None, :])[0]
    cdf = np.cumsum(np.exp(lp))
    u = rng.random() * cdf[-1]
    tok = int(np.searchsorted(cdf, u, side="right"))
    tok = min(tok, len(cdf) - 1)
    # never land on a zero-probability token through float round-off
    while not np.isfinite(lp[tok]):
        tok -= 1
    return tok, float(lp[tok])


def sft_loss(params: PolicyParameters, batch: TokenBatch) -> tuple[float, np.ndarray]:
    """Masked mean negative log-likelihood and its gradient."""
    total = batch.mask.sum()
    if total == 0:
        raise EmptyMask("sft_loss needs at least one unmasked token")
    lp = score_tokens(params, batch)
    loss = -float(np.sum(batch.mask * lp) / total)
    return loss, logp_gradient(params, batch, -batch.mask / total)


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout (little-endian):
#   8 bytes   magic b"TEVPARAM"
#   4 bytes   uint32 format version (currently 1)
#   4 bytes   uint32 header length H
#   H bytes   UTF-8 JSON header: shape, temperature, layout sizes, dtype
#   rest      float64 weights in C order

_MAGIC = b"TEVPARAM"
_VERSION = 1


def params_to_bytes(params: PolicyParameters) -> bytes:
    header = json.dumps(
        {
            "shape": list(params.weights.shape),
            "dtype": "<f8",
            "temperature": params.temperature,
            "vocab_size": params.layout.vocab_size,
            "n_hist": params.layout.n_hist,
            "n_guide_hash": params.layout.n_guide_hash,
        },
        sort_keys=True,
    ).encode("utf-8")
    body = np.ascontiguousarray(params.weights, dtype="<f8").tobytes()
    return _MAGIC + struct.pack("<II", _VERSION, len(header)) + header + body


def params_from_bytes(blob: bytes) -> PolicyParameters:
    if blob[:8] != _MAGIC:
        raise ValueError("not a parameter checkpoint")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    w = np.frombuffer(blob[16 + hlen :], dtype="<f8").reshape(header["shape"]).copy()
    layout = FeatureLayout(header["vocab_size"], header["n_hist"], header["n_guide_hash"])
    return PolicyParameters(w, layout, header["temperature"])


def save_params(path: str, params: PolicyParameters) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_params(path: str) -> PolicyParameters:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
