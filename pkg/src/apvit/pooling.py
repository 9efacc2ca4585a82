"""Attentive patch pooling: score every stem cell with a criterion map, then
either keep the top-k cells as tokens (hard selection) or gate all cells by
the sigmoid of their score (soft pooling).

Criteria map a [C, H, W] feature block to one score per cell: channel sum,
channel absolute sum, channel max, or a tiny learned two-layer 1x1-conv head
(its output is used raw; no squashing, selection only needs an ordering).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import ops


class CriterionKind(Enum):
    SUM = "sum"
    ABS = "abs"
    MAX = "max"
    LANET = "lanet"


@dataclass(frozen=True)
class PatchSelection:
    """Result of hard top-k pooling: flat cell indices (strictly ascending)
    and the corresponding [k, C] token rows."""

    indices: np.ndarray
    tokens: np.ndarray


def lanet_param_shapes(channels: int, reduction_ratio: int) -> dict[str, tuple]:
    if channels % reduction_ratio != 0:
        raise ValueError(
            f"criterion head needs channels divisible by its reduction ratio, got {channels}/{reduction_ratio}"
        )
    hidden = channels // reduction_ratio
    return {
        "lanet.conv1.w": (hidden, channels, 1, 1),
        "lanet.conv1.b": (hidden,),
        "lanet.conv2.w": (1, hidden, 1, 1),
        "lanet.conv2.b": (1,),
    }


def criterion_map(fmap: np.ndarray, kind: CriterionKind, params: dict | None = None):
    """Score each cell of a [C, H, W] map.  Returns ([H, W] scores, backward)
    where backward maps d_scores to d_fmap (plus parameter grads for the
    learned criterion)."""
    if fmap.ndim != 3:
        raise ValueError(f"criterion_map expects [C,H,W], got {fmap.shape}")
    c = fmap.shape[0]

    if kind is CriterionKind.SUM:
        out = np.add.reduce(fmap, axis=0)

        def backward(d_out):
            return np.broadcast_to(d_out, fmap.shape).copy(), {}

    elif kind is CriterionKind.ABS:
        out = np.add.reduce(np.abs(fmap), axis=0)

        def backward(d_out):
            return np.sign(fmap) * d_out, {}

    elif kind is CriterionKind.MAX:
        out = fmap.max(axis=0)
        arg = fmap.argmax(axis=0)  # ties: smallest channel index

        def backward(d_out):
            d_fmap = np.zeros_like(fmap)
            hh, ww = np.indices(out.shape)
            d_fmap[arg, hh, ww] = d_out
            return d_fmap, {}

    elif kind is CriterionKind.LANET:
        if params is None:
            raise ValueError("learned criterion requires its conv parameters")
        z1, conv1_bwd = ops.conv2d(fmap, params["lanet.conv1.w"])
        z1 = z1 + params["lanet.conv1.b"][:, None, None]
        h1, relu_bwd = ops.relu(z1)
        z2, conv2_bwd = ops.conv2d(h1, params["lanet.conv2.w"])
        out = z2[0] + params["lanet.conv2.b"][0]

        def backward(d_out):
            grads = {"lanet.conv2.b": np.array([d_out.sum()])}
            d_h1, grads["lanet.conv2.w"] = conv2_bwd(d_out[None])
            d_z1 = relu_bwd(d_h1)
            grads["lanet.conv1.b"] = d_z1.sum(axis=(1, 2))
            d_fmap, grads["lanet.conv1.w"] = conv1_bwd(d_z1)
            return d_fmap, grads

    else:
        raise ValueError(f"unknown criterion kind: {kind!r}")

    return out, backward


def top_k_indices(scores_flat: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, returned in ascending index order.
    Ties resolve toward the smaller index (stable sort on negated scores)."""
    if not 1 <= k <= scores_flat.size:
        raise ValueError(f"k={k} out of range for {scores_flat.size} cells")
    winners = np.argsort(-scores_flat, kind="stable")[:k]
    return np.sort(winners)


def select_top_k(fmap: np.ndarray, attn: np.ndarray, k: int):
    """Hard attentive pooling: keep the k best-scoring cells of a [C, H, W]
    map as [k, C] token rows.  Selection is a constant w.r.t. the inputs, so
    backward is a pure scatter of token gradients; scores get no gradient."""
    c, h, w = fmap.shape
    if attn.shape != (h, w):
        raise ValueError(f"scores {attn.shape} do not match grid {(h, w)}")
    idx = top_k_indices(attn.reshape(-1), k)
    rows = fmap.reshape(c, h * w).T  # row i = cell i's channel vector
    tokens, gather_bwd = ops.gather_rows(np.ascontiguousarray(rows), idx)

    def backward(d_tokens):
        d_rows = gather_bwd(d_tokens)
        return d_rows.T.reshape(c, h, w)

    return PatchSelection(indices=idx, tokens=tokens), backward


def soft_pool(fmap: np.ndarray, attn: np.ndarray):
    """Soft attentive pooling: gate every cell by sigmoid(score).  Token count
    is unchanged; gradients flow to both the features and the scores."""
    c, h, w = fmap.shape
    if attn.shape != (h, w):
        raise ValueError(f"scores {attn.shape} do not match grid {(h, w)}")
    gate, sig_bwd = ops.sigmoid(attn)
    out = fmap * gate[None]

    def backward(d_out):
        d_fmap = d_out * gate[None]
        d_gate = (d_out * fmap).sum(axis=0)
        return d_fmap, sig_bwd(d_gate)

    return out, backward
