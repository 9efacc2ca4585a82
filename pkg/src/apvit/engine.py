"""Batched forward/backward engine behind the model API.

One implementation serves training, evaluation, and the per-sample forward
(batch of one).  Contractions go through BLAS (np.matmul) for throughput;
that reorders floating-point sums relative to the `ops` reference kernels,
which the consistency tests bound at 1e-12 relative.  Everything is float64
and deterministic for a fixed batch composition.

Selection semantics (top-k ties to the smaller index, kept ids ascending,
class token immortal) are shared with the per-sample modules exactly: both
sides reduce to a stable argsort on negated scores.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import sqrt

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .encoder import AtpVariant, keep_schedule
from .model import ApvitConfig, HeadKind, PoolingMode
from .pooling import CriterionKind
from .stem import normalize_image

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class MaddCounter:
    """Counts floating-point multiply-add pairs (x2 = FLOPs) performed by the
    engine's matmul/conv contractions.  Normalization, softmax, activations,
    and elementwise scaling are excluded, matching the analytic model."""

    def __init__(self) -> None:
        self.flops = 0

    def add_matmul(self, a_shape: tuple, b_shape: tuple) -> None:
        batch = 1
        for n in np.broadcast_shapes(a_shape[:-2], b_shape[:-2]):
            batch *= n
        self.flops += 2 * batch * a_shape[-2] * a_shape[-1] * b_shape[-1]


def _mm(a: np.ndarray, b: np.ndarray, counter: MaddCounter | None) -> np.ndarray:
    if counter is not None:
        counter.add_matmul(a.shape, b.shape)
    return a @ b


@dataclass
class Aux:
    """Diagnostics shared by visualization and selection analysis."""

    criterion: np.ndarray  # [B, H, W]
    app_indices: np.ndarray  # [B, k'] flat cell ids entering the encoder
    trail: list  # per block: [B, t_i] surviving original cell ids
    schedule: tuple
    # smallest kept-vs-dropped score margin at each selection event (batch
    # minimum); gradient audits reseed when a margin is too thin to perturb
    selection_gaps: tuple = ()


# ---------------------------------------------------------------------------
# stem


def _conv3x3_forward(x, w, b, counter):
    bsz, c_in, h, wd = x.shape
    c_out = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # [B, Cin, H, W, 3, 3]
    patches = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        bsz * h * wd, c_in * 9
    )
    out = _mm(patches, w.reshape(c_out, -1).T, counter) + b
    out = out.reshape(bsz, h, wd, c_out).transpose(0, 3, 1, 2)
    return out, {"patches": patches, "x_shape": x.shape, "w": w}


def _conv3x3_backward(d_out, cache):
    bsz, c_in, h, wd = cache["x_shape"]
    w = cache["w"]
    c_out = w.shape[0]
    d_mat = np.ascontiguousarray(d_out.transpose(0, 2, 3, 1)).reshape(-1, c_out)
    d_w = (d_mat.T @ cache["patches"]).reshape(c_out, c_in, 3, 3)
    d_b = d_mat.sum(axis=0)
    d_patches = (d_mat @ w.reshape(c_out, -1)).reshape(bsz, h, wd, c_in, 3, 3)
    d_xp = np.zeros((bsz, c_in, h + 2, wd + 2))
    for u in range(3):
        for v in range(3):
            d_xp[:, :, u : u + h, v : v + wd] += d_patches[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    return d_xp[:, :, 1:-1, 1:-1], d_w, d_b


def _pool2x2_forward(z):
    bsz, c, h, wd = z.shape
    ho, wo = h // 2, wd // 2
    best = np.full((bsz, c, ho, wo), -np.inf)
    arg_u = np.zeros((bsz, c, ho, wo), dtype=np.intp)
    arg_v = np.zeros((bsz, c, ho, wo), dtype=np.intp)
    for u in range(2):
        for v in range(2):
            patch = z[:, :, u::2, v::2]
            better = patch > best  # strict: row-major-first tie rule
            best = np.where(better, patch, best)
            arg_u[better] = u
            arg_v[better] = v
    return best, (arg_u, arg_v, z.shape)


def _pool2x2_backward(d_y, cache):
    arg_u, arg_v, z_shape = cache
    d_z = np.zeros(z_shape)
    bi, ci, io, jo = np.indices(arg_u.shape)
    # stride-2 windows are disjoint, each target is written at most once
    d_z[bi, ci, io * 2 + arg_u, jo * 2 + arg_v] = d_y
    return d_z


def _stem_forward(x, params, config, counter):
    caches = []
    cur = x
    pre_act = None
    for i in range(config.stem.stages):
        z, conv_cache = _conv3x3_forward(
            cur, params[f"stem.conv{i}.w"], params[f"stem.conv{i}.b"], counter
        )
        pre_act, pool_cache = _pool2x2_forward(z)
        cur = np.maximum(pre_act, 0.0)
        caches.append({"conv": conv_cache, "pool": pool_cache, "pre_act": pre_act})
    return cur, pre_act, caches


def _stem_backward(d_features, d_tap, caches, grads):
    d_cur = d_features
    for i in reversed(range(len(caches))):
        c = caches[i]
        d_pre = np.where(c["pre_act"] > 0.0, d_cur, 0.0)
        if i == len(caches) - 1 and d_tap is not None:
            d_pre = d_pre + d_tap
        d_z = _pool2x2_backward(d_pre, c["pool"])
        d_cur, grads[f"stem.conv{i}.w"], grads[f"stem.conv{i}.b"] = _conv3x3_backward(
            d_z, c["conv"]
        )


# ---------------------------------------------------------------------------
# criterion


def _criterion_forward(src, params, config, counter):
    """src: [B, C, H, W] -> scores [B, H, W] (+ cache for the soft backward)."""
    kind = config.criterion
    if kind is CriterionKind.SUM:
        return src.sum(axis=1), {}
    if kind is CriterionKind.ABS:
        return np.abs(src).sum(axis=1), {}
    if kind is CriterionKind.MAX:
        return src.max(axis=1), {"argmax": src.argmax(axis=1)}
    if kind is CriterionKind.LANET:
        bsz, c, h, wd = src.shape
        w1 = params["lanet.conv1.w"].reshape(-1, c)  # [hidden, C]
        w2 = params["lanet.conv2.w"].reshape(1, -1)  # [1, hidden]
        rows = np.ascontiguousarray(src.transpose(0, 2, 3, 1)).reshape(-1, c)
        z1 = _mm(rows, w1.T, counter) + params["lanet.conv1.b"]
        h1 = np.maximum(z1, 0.0)
        z2 = _mm(h1, w2.T, counter) + params["lanet.conv2.b"]
        return z2.reshape(bsz, h, wd), {"rows": rows, "z1": z1, "h1": h1}
    raise ValueError(f"unknown criterion kind: {kind!r}")


def _criterion_backward(d_crit, src, params, config, cache, grads):
    """d_crit: [B, H, W] -> gradient w.r.t. src (plus criterion-head grads)."""
    kind = config.criterion
    if kind is CriterionKind.SUM:
        return np.broadcast_to(d_crit[:, None], src.shape).copy()
    if kind is CriterionKind.ABS:
        return np.sign(src) * d_crit[:, None]
    if kind is CriterionKind.MAX:
        d_src = np.zeros_like(src)
        bi, hi, wi = np.indices(d_crit.shape)
        d_src[bi, cache["argmax"], hi, wi] = d_crit
        return d_src
    bsz, c, h, wd = src.shape
    w1 = params["lanet.conv1.w"].reshape(-1, c)
    w2 = params["lanet.conv2.w"].reshape(1, -1)
    d_z2 = d_crit.reshape(-1, 1)
    grads["lanet.conv2.w"] = (d_z2.T @ cache["h1"]).reshape(params["lanet.conv2.w"].shape)
    grads["lanet.conv2.b"] = d_z2.sum(axis=0)
    d_h1 = d_z2 @ w2
    d_z1 = np.where(cache["z1"] > 0.0, d_h1, 0.0)
    grads["lanet.conv1.w"] = (d_z1.T @ cache["rows"]).reshape(params["lanet.conv1.w"].shape)
    grads["lanet.conv1.b"] = d_z1.sum(axis=0)
    d_rows = d_z1 @ w1
    return d_rows.reshape(bsz, h, wd, c).transpose(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# transformer block


def _ln_forward(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    return x_hat * g + b, {"x_hat": x_hat, "inv_std": inv_std, "g": g}


def _ln_backward(d_y, cache):
    x_hat, inv_std, g = cache["x_hat"], cache["inv_std"], cache["g"]
    axes = tuple(range(d_y.ndim - 1))
    d_b = d_y.sum(axis=axes)
    d_g = (d_y * x_hat).sum(axis=axes)
    d_xhat = d_y * g
    d_x = inv_std * (
        d_xhat
        - d_xhat.mean(axis=-1, keepdims=True)
        - x_hat * (d_xhat * x_hat).mean(axis=-1, keepdims=True)
    )
    return d_x, d_g, d_b


def _block_forward(x, params, prefix, heads, eps, counter):
    bsz, t1, d = x.shape
    dh = d // heads
    scale = 1.0 / sqrt(dh)
    xn, ln1c = _ln_forward(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"], eps)
    wqkv = np.concatenate(
        [params[f"{prefix}.attn.wq"], params[f"{prefix}.attn.wk"], params[f"{prefix}.attn.wv"]],
        axis=1,
    )
    qkv = _mm(xn.reshape(-1, d), wqkv, counter).reshape(bsz, t1, 3 * d)
    q, k, v = qkv[:, :, :d], qkv[:, :, d : 2 * d], qkv[:, :, 2 * d :]
    qh = q.reshape(bsz, t1, heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(bsz, t1, heads, dh).transpose(0, 2, 1, 3)
    vh = v.reshape(bsz, t1, heads, dh).transpose(0, 2, 1, 3)
    logits = _mm(qh, kh.transpose(0, 1, 3, 2), counter) * scale
    record = logits[:, :, 0, 1:].copy()  # class row vs patch tokens, pre-softmax
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    attn = e / e.sum(axis=-1, keepdims=True)
    ctx = _mm(attn, vh, counter)  # [B, h, T, dh]
    merged = np.ascontiguousarray(ctx.transpose(0, 2, 1, 3)).reshape(bsz, t1, d)
    attn_out = _mm(merged.reshape(-1, d), params[f"{prefix}.attn.wo"], counter).reshape(
        bsz, t1, d
    )
    y = x + attn_out
    yn, ln2c = _ln_forward(y, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"], eps)
    h1 = _mm(yn.reshape(-1, d), params[f"{prefix}.mlp.w1"], counter).reshape(
        bsz, t1, 4 * d
    ) + params[f"{prefix}.mlp.b1"]
    phi = 0.5 * (1.0 + erf(h1 * _INV_SQRT2))
    hg = h1 * phi
    m = _mm(hg.reshape(-1, 4 * d), params[f"{prefix}.mlp.w2"], counter).reshape(
        bsz, t1, d
    ) + params[f"{prefix}.mlp.b2"]
    out = y + m
    cache = {
        "xn": xn, "ln1c": ln1c, "wqkv": wqkv, "qh": qh, "kh": kh, "vh": vh,
        "attn": attn, "merged": merged, "yn": yn, "ln2c": ln2c,
        "h1": h1, "phi": phi, "hg": hg, "scale": scale, "heads": heads,
    }
    return out, record, cache


def _block_backward(d_out, params, prefix, cache, grads):
    bsz, t1, d = d_out.shape
    heads = cache["heads"]
    dh = d // heads
    # MLP branch
    d_m_flat = d_out.reshape(-1, d)
    grads[f"{prefix}.mlp.w2"] = cache["hg"].reshape(-1, 4 * d).T @ d_m_flat
    grads[f"{prefix}.mlp.b2"] = d_m_flat.sum(axis=0)
    d_hg = (d_m_flat @ params[f"{prefix}.mlp.w2"].T).reshape(bsz, t1, 4 * d)
    h1, phi = cache["h1"], cache["phi"]
    d_h1 = d_hg * (phi + h1 * np.exp(-0.5 * h1 * h1) * _INV_SQRT2PI)
    d_h1_flat = d_h1.reshape(-1, 4 * d)
    grads[f"{prefix}.mlp.w1"] = cache["yn"].reshape(-1, d).T @ d_h1_flat
    grads[f"{prefix}.mlp.b1"] = d_h1_flat.sum(axis=0)
    d_yn = (d_h1_flat @ params[f"{prefix}.mlp.w1"].T).reshape(bsz, t1, d)
    d_y, grads[f"{prefix}.ln2.g"], grads[f"{prefix}.ln2.b"] = _ln_backward(d_yn, cache["ln2c"])
    d_y = d_y + d_out  # residual
    # attention branch
    d_attn_flat = d_y.reshape(-1, d)
    grads[f"{prefix}.attn.wo"] = cache["merged"].reshape(-1, d).T @ d_attn_flat
    d_merged = (d_attn_flat @ params[f"{prefix}.attn.wo"].T).reshape(bsz, t1, d)
    d_ctx = d_merged.reshape(bsz, t1, heads, dh).transpose(0, 2, 1, 3)
    attn, vh = cache["attn"], cache["vh"]
    d_attn = d_ctx @ vh.transpose(0, 1, 3, 2)
    d_vh = attn.transpose(0, 1, 3, 2) @ d_ctx
    d_logits = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
    d_raw = d_logits * cache["scale"]
    d_qh = d_raw @ cache["kh"]
    d_kh = d_raw.transpose(0, 1, 3, 2) @ cache["qh"]
    def _unsplit(a):
        return np.ascontiguousarray(a.transpose(0, 2, 1, 3)).reshape(bsz, t1, d)
    d_qkv = np.concatenate([_unsplit(d_qh), _unsplit(d_kh), _unsplit(d_vh)], axis=2)
    d_qkv_flat = d_qkv.reshape(-1, 3 * d)
    d_wqkv = cache["xn"].reshape(-1, d).T @ d_qkv_flat
    grads[f"{prefix}.attn.wq"] = d_wqkv[:, :d]
    grads[f"{prefix}.attn.wk"] = d_wqkv[:, d : 2 * d]
    grads[f"{prefix}.attn.wv"] = d_wqkv[:, 2 * d :]
    d_xn = (d_qkv_flat @ cache["wqkv"].T).reshape(bsz, t1, d)
    d_x, grads[f"{prefix}.ln1.g"], grads[f"{prefix}.ln1.b"] = _ln_backward(d_xn, cache["ln1c"])
    return d_x + d_y


# ---------------------------------------------------------------------------
# token scoring/selection (batched twins of the per-sample rules)


def _atp_scores_batch(record: np.ndarray, variant: AtpVariant) -> np.ndarray:
    if variant is AtpVariant.SUM:
        return np.add.reduce(record, axis=1)
    if variant is AtpVariant.ABS:
        return np.add.reduce(np.abs(record), axis=1)
    if variant is AtpVariant.MAX:
        return record.max(axis=1)
    raise ValueError(f"unknown variant: {variant!r}")


def _top_k_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k with ties to the smaller index, ascending per row."""
    order = np.argsort(-scores, axis=1, kind="stable")
    return np.sort(order[:, :k], axis=1)


def _boundary_gap(scores: np.ndarray, k: int) -> float:
    """Batch-minimum margin between the k-th and (k+1)-th best scores."""
    if k >= scores.shape[1]:
        return np.inf
    ranked = -np.sort(-scores, axis=1)
    return float((ranked[:, k - 1] - ranked[:, k]).min())


# ---------------------------------------------------------------------------
# full pass


def forward_batch(
    images: np.ndarray,
    params: dict,
    config: ApvitConfig,
    *,
    k: int | None = None,
    r: float | None = None,
    counter: MaddCounter | None = None,
):
    """Classify a [B, Cin, S, S] byte-image batch.

    ``k``/``r`` override the configured pooling targets (training schedules
    anneal them).  Returns (logits [B, num_classes], cache, Aux); feed the
    cache to ``backward_batch``.
    """
    if images.ndim != 4:
        raise ValueError(f"expected [B, Cin, S, S] images, got {images.shape}")
    bsz = images.shape[0]
    d = config.embed_dim
    grid = config.stem.grid_side
    hw = config.stem.patch_count
    x = normalize_image(images)

    features, tap, stem_caches = _stem_forward(x, params, config, counter)
    crit_src = tap if config.linear_tap else features
    crit, crit_cache = _criterion_forward(crit_src, params, config, counter)

    rows = np.ascontiguousarray(features.transpose(0, 2, 3, 1)).reshape(bsz, hw, -1)
    mode = config.pooling_mode
    gate = None
    gaps = []
    if mode is PoolingMode.HARD:
        k_eff = config.k if k is None else k
        if not 1 <= k_eff <= hw:
            raise ValueError(f"k={k_eff} out of range for {hw} cells")
        flat_scores = crit.reshape(bsz, hw)
        ids = _top_k_rows(flat_scores, k_eff)
        gaps.append(_boundary_gap(flat_scores, k_eff))
        tokens = np.take_along_axis(rows, ids[:, :, None], axis=1)
    elif mode is PoolingMode.SOFT:
        flat = crit.reshape(bsz, hw)
        gate = np.empty_like(flat)
        pos = flat >= 0
        gate[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
        ex = np.exp(flat[~pos])
        gate[~pos] = ex / (1.0 + ex)
        tokens = rows * gate[:, :, None]
        ids = np.broadcast_to(np.arange(hw), (bsz, hw))
    else:
        tokens = rows
        ids = np.broadcast_to(np.arange(hw), (bsz, hw))

    n_patches = tokens.shape[1]
    embedded = _mm(tokens.reshape(-1, tokens.shape[2]), params["embed.w"], counter)
    embedded = embedded.reshape(bsz, n_patches, d) + params["embed.b"]
    pos_patch = params["pos_table"][ids + 1]
    cls_row = params["cls_token"] + params["pos_table"][0]
    seq = np.concatenate(
        [np.broadcast_to(cls_row, (bsz, 1, d)), embedded + pos_patch], axis=1
    )

    r_eff = config.r if r is None else r
    schedule = keep_schedule(n_patches, r_eff, config.blocks)
    kept = ids
    trail = []
    block_caches = []
    for i, target in enumerate(schedule):
        seq, record, bcache = _block_forward(seq, params, f"block{i}", config.heads, config.ln_eps, counter)
        sel = None
        if target < seq.shape[1] - 1:
            scores = _atp_scores_batch(record, config.atp_variant)
            sel = _top_k_rows(scores, target)
            gaps.append(_boundary_gap(scores, target))
            token_rows = np.concatenate(
                [np.zeros((bsz, 1), dtype=np.intp), sel + 1], axis=1
            )
            seq = np.take_along_axis(seq, token_rows[:, :, None], axis=1)
            kept = np.take_along_axis(kept, sel, axis=1)
        trail.append(kept)
        block_caches.append({"block": bcache, "sel": sel})

    final, final_ln_cache = _ln_forward(seq, params["final_ln.g"], params["final_ln.b"], config.ln_eps)
    if config.head is HeadKind.CLT:
        readout = final[:, 0]
    else:
        readout = final[:, 1:].mean(axis=1)
    logits = _mm(readout, params["head.w"], counter) + params["head.b"]

    cache = {
        "config": config,
        "bsz": bsz,
        "stem_caches": stem_caches,
        "crit_src": crit_src,
        "crit_cache": crit_cache,
        "rows": rows,
        "gate": gate,
        "ids": ids,
        "tokens": tokens,
        "block_caches": block_caches,
        "final_ln_cache": final_ln_cache,
        "readout": readout,
        "final_patches": seq.shape[1] - 1,
    }
    aux = Aux(
        criterion=crit,
        app_indices=np.array(ids),
        trail=trail,
        schedule=schedule,
        selection_gaps=tuple(gaps),
    )
    return logits, cache, aux


def backward_batch(d_logits: np.ndarray, params: dict, cache: dict) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given d(loss)/d(logits).
    Parameters with no gradient path (e.g. the learned criterion under hard
    selection) come back as zeros."""
    config: ApvitConfig = cache["config"]
    bsz = cache["bsz"]
    d = config.embed_dim
    grads: dict[str, np.ndarray] = {}

    grads["head.w"] = cache["readout"].T @ d_logits
    grads["head.b"] = d_logits.sum(axis=0)
    d_readout = d_logits @ params["head.w"].T

    t1 = cache["final_patches"] + 1
    d_final = np.zeros((bsz, t1, d))
    if config.head is HeadKind.CLT:
        d_final[:, 0] = d_readout
    else:
        d_final[:, 1:] = d_readout[:, None, :] / cache["final_patches"]
    d_seq, grads["final_ln.g"], grads["final_ln.b"] = _ln_backward(d_final, cache["final_ln_cache"])

    for i in reversed(range(config.blocks)):
        bc = cache["block_caches"][i]
        if bc["sel"] is not None:
            sel = bc["sel"]
            prev_t1 = bc["block"]["xn"].shape[1]
            full = np.zeros((bsz, prev_t1, d))
            full[:, 0] = d_seq[:, 0]
            np.put_along_axis(full[:, 1:], sel[:, :, None], d_seq[:, 1:], axis=1)
            d_seq = full
        d_seq = _block_backward(d_seq, params, f"block{i}", bc["block"], grads)

    d_cls_row = d_seq[:, 0].sum(axis=0)
    grads["cls_token"] = d_cls_row
    d_e = d_seq[:, 1:]
    d_pos = np.zeros_like(params["pos_table"])
    d_pos[0] = d_cls_row
    ids = cache["ids"]
    np.add.at(d_pos, (ids + 1).ravel(), d_e.reshape(-1, d))
    grads["pos_table"] = d_pos

    tokens = cache["tokens"]
    d_e_flat = d_e.reshape(-1, d)
    grads["embed.w"] = tokens.reshape(-1, tokens.shape[2]).T @ d_e_flat
    grads["embed.b"] = d_e_flat.sum(axis=0)
    d_tokens = (d_e_flat @ params["embed.w"].T).reshape(tokens.shape)

    rows = cache["rows"]
    hw = rows.shape[1]
    mode = config.pooling_mode
    d_crit_src = None
    if mode is PoolingMode.HARD:
        d_rows = np.zeros_like(rows)
        np.put_along_axis(d_rows, ids[:, :, None], d_tokens, axis=1)
    elif mode is PoolingMode.SOFT:
        gate = cache["gate"]
        d_rows = d_tokens * gate[:, :, None]
        d_gate = (d_tokens * rows).sum(axis=2)
        d_flat = d_gate * gate * (1.0 - gate)
        grid = config.stem.grid_side
        d_crit = d_flat.reshape(bsz, grid, grid)
        d_crit_src = _criterion_backward(
            d_crit, cache["crit_src"], params, config, cache["crit_cache"], grads
        )
    else:
        d_rows = d_tokens

    grid = config.stem.grid_side
    d_features = np.ascontiguousarray(
        d_rows.reshape(bsz, grid, grid, -1).transpose(0, 3, 1, 2)
    )
    d_tap = None
    if d_crit_src is not None:
        if config.linear_tap:
            d_tap = d_crit_src
        else:
            d_features = d_features + d_crit_src
    _stem_backward(d_features, d_tap, cache["stem_caches"], grads)

    # parameters outside every gradient path still get explicit zeros
    for name, tensor in params.items():
        if name not in grads:
            grads[name] = np.zeros_like(tensor)
    return grads
