"""Pre-LN transformer encoder over a class token plus surviving patch tokens,
with attentive token pooling: after each block in the second half of the
stack, patch tokens are ranked by the class token's pre-softmax attention
logits (summed over heads) and only the best keep floor(r * count) survive.
The class token is never dropped.

This module is the per-sample reference composition built from `ops`; the
batched training engine mirrors it and is tested against it.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from math import floor, sqrt

import numpy as np

from . import ops
from .pooling import top_k_indices


class AtpVariant(Enum):
    SUM = "sum"
    ABS = "abs"
    MAX = "max"


@dataclass(frozen=True)
class TokenSeq:
    """Token matrix with row 0 the class token; ``kept_patch_ids[i]`` is the
    original stem-cell index of token row i+1."""

    tokens: np.ndarray
    kept_patch_ids: np.ndarray

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValueError(f"tokens must be [T+1, D], got {self.tokens.shape}")
        if self.kept_patch_ids.shape != (self.tokens.shape[0] - 1,):
            raise ValueError(
                f"{self.kept_patch_ids.shape[0]} patch ids for {self.tokens.shape[0]} token rows"
            )

    @property
    def patch_count(self) -> int:
        return self.tokens.shape[0] - 1


@dataclass(frozen=True)
class AttnRecord:
    """Pre-softmax attention logits of the class token against each patch
    token, one row per head, 1/sqrt(d_head) scale included."""

    class_logits: np.ndarray  # [heads, patch_count]


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    t, d = x.shape
    return x.reshape(t, heads, d // heads).transpose(1, 0, 2)


def msa_forward(tokens: np.ndarray, params: dict, prefix: str, heads: int, eps: float = 1e-5):
    """LayerNorm -> multi-head self-attention -> output projection.

    Returns (out [T+1, D], AttnRecord).  No projection biases.
    """
    t1, d = tokens.shape
    if d % heads != 0:
        raise ValueError(f"embed dim {d} not divisible by {heads} heads")
    xn, _ = ops.layer_norm(tokens, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"], eps)
    q, _ = ops.matmul(xn, params[f"{prefix}.attn.wq"])
    k, _ = ops.matmul(xn, params[f"{prefix}.attn.wk"])
    v, _ = ops.matmul(xn, params[f"{prefix}.attn.wv"])
    qh, kh, vh = (_split_heads(m, heads) for m in (q, k, v))
    scale = 1.0 / sqrt(d // heads)
    ctx = np.empty((heads, t1, d // heads))
    class_logits = np.empty((heads, t1 - 1))
    for h in range(heads):
        logits, _ = ops.matmul(qh[h], np.ascontiguousarray(kh[h].T))
        logits = logits * scale
        class_logits[h] = logits[0, 1:]
        weights, _ = ops.softmax_rows(logits)
        ctx[h], _ = ops.matmul(weights, vh[h])
    merged = ctx.transpose(1, 0, 2).reshape(t1, d)
    out, _ = ops.matmul(np.ascontiguousarray(merged), params[f"{prefix}.attn.wo"])
    return out, AttnRecord(class_logits=class_logits)


def block_forward(seq: TokenSeq, params: dict, prefix: str, heads: int, eps: float = 1e-5):
    """One pre-LN block: x += MSA(LN(x)); x += MLP(LN(x)).  Token membership
    is unchanged; the caller applies token pooling on the output."""
    x = seq.tokens
    attn_out, record = msa_forward(x, params, prefix, heads, eps)
    y = x + attn_out
    yn, _ = ops.layer_norm(y, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"], eps)
    h1, _ = ops.matmul(yn, params[f"{prefix}.mlp.w1"])
    h1 = h1 + params[f"{prefix}.mlp.b1"]
    hg, _ = ops.gelu(h1)
    m, _ = ops.matmul(hg, params[f"{prefix}.mlp.w2"])
    out = y + m + params[f"{prefix}.mlp.b2"]
    return TokenSeq(tokens=out, kept_patch_ids=seq.kept_patch_ids), record


def atp_scores(record: AttnRecord, variant: AtpVariant = AtpVariant.SUM) -> np.ndarray:
    """Collapse per-head class-attention logits to one score per patch token."""
    logits = record.class_logits
    if variant is AtpVariant.SUM:
        return np.add.reduce(logits, axis=0)
    if variant is AtpVariant.ABS:
        return np.add.reduce(np.abs(logits), axis=0)
    if variant is AtpVariant.MAX:
        return logits.max(axis=0)
    raise ValueError(f"unknown variant: {variant!r}")


def atp_select(seq: TokenSeq, scores: np.ndarray, keep_num: int) -> TokenSeq:
    """Keep the ``keep_num`` best-scoring patch tokens (ties to the smaller
    current index), preserving relative order; the class token always stays."""
    t = seq.patch_count
    if scores.shape != (t,):
        raise ValueError(f"{scores.shape[0]} scores for {t} patch tokens")
    if not 1 <= keep_num <= t:
        raise ValueError(f"keep_num={keep_num} out of range for {t} patch tokens")
    sel = top_k_indices(scores, keep_num)
    rows = np.concatenate(([0], sel + 1))
    return TokenSeq(tokens=seq.tokens[rows], kept_patch_ids=seq.kept_patch_ids[sel])


def keep_schedule(k: int, r: float, blocks: int) -> tuple[int, ...]:
    """Patch-token count after each of ``blocks`` blocks: constant at k for
    the first half, then count <- floor(r * count) per block.

    floor is taken on the IEEE-double product.  Raises if the count would
    fall below 1 or if ``blocks`` is odd.
    """
    if blocks < 2 or blocks % 2 != 0:
        raise ValueError(f"blocks must be even and >= 2, got {blocks}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not 0.0 < r <= 1.0:
        raise ValueError(f"r must be in (0, 1], got {r}")
    counts = []
    count = k
    for i in range(blocks):
        if i >= blocks // 2:
            count = floor(r * count)
            if count < 1:
                raise ValueError(
                    f"token schedule hits zero at block {i} (k={k}, r={r})"
                )
        counts.append(count)
    return tuple(counts)


def encoder_forward(
    seq: TokenSeq,
    params: dict,
    heads: int,
    schedule: tuple[int, ...],
    variant: AtpVariant = AtpVariant.SUM,
    eps: float = 1e-5,
):
    """Run every block, pooling tokens after block i whenever schedule[i] is
    below the current patch count.  Returns (final TokenSeq, survival trail);
    the class embedding is row 0 of the final tokens, and trail[i] holds the
    original patch ids alive after block i."""
    if seq.patch_count < schedule[0]:
        raise ValueError(
            f"schedule starts at {schedule[0]} but sequence has {seq.patch_count} patches"
        )
    trail = []
    for i, target in enumerate(schedule):
        seq, record = block_forward(seq, params, f"block{i}", heads, eps)
        if target < seq.patch_count:
            seq = atp_select(seq, atp_scores(record, variant), target)
        trail.append(seq.kept_patch_ids.copy())
    return seq, trail
