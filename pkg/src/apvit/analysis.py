"""Cost accounting, gradient auditing, and selection overlays.

The FLOPs model counts multiply-add pairs (times two) for every contraction
the engine performs: stem and criterion convolutions, the patch embedding,
attention and MLP matmuls, and the classifier head.  Normalization, softmax,
activations, and elementwise scaling are excluded.  The engine's instrumented
counter must agree with the analytic model exactly, not approximately.

The gradient audit runs central differences on sampled coordinates of every
parameter tensor and insists on thick selection margins first, so a 1e-5
perturbation can never flip which tokens survive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .data import occluded_cells
from .encoder import keep_schedule
from .model import ApvitConfig, PoolingMode, init_params
from .pooling import CriterionKind
from .train import cross_entropy


# ---------------------------------------------------------------------------
# FLOPs


@dataclass
class FlopsReport:
    per_stage: dict
    total: int
    transformer: int  # all block attention + MLP cost
    baseline_transformer: int  # same model with every token kept
    transformer_ratio: float
    schedule: tuple

    def table(self) -> str:
        width = max(len(n) for n in self.per_stage)
        lines = [f"{'stage':<{width}}  flops"]
        for name, flops in self.per_stage.items():
            lines.append(f"{name:<{width}}  {flops:>14,}")
        lines.append(f"{'total':<{width}}  {self.total:>14,}")
        lines.append("")
        lines.append(f"transformer:          {self.transformer:,}")
        lines.append(f"baseline transformer: {self.baseline_transformer:,}")
        lines.append(f"transformer ratio:    {self.transformer_ratio:.4f}")
        lines.append(f"token schedule:       {list(self.schedule)}")
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {
            "per_stage": dict(self.per_stage),
            "total": self.total,
            "transformer": self.transformer,
            "baseline_transformer": self.baseline_transformer,
            "transformer_ratio": self.transformer_ratio,
            "schedule": list(self.schedule),
        }


def _block_flops(n: int, d: int) -> int:
    """One pre-LN block at n tokens: QKV + logits + context + output
    projection, plus the two MLP matmuls."""
    msa = 2 * (3 * n * d * d + n * n * d + n * n * d + n * d * d)
    mlp = 2 * (8 * n * d * d)
    return msa + mlp


def _transformer_flops(schedule: tuple, first_count: int, d: int) -> int:
    total = 0
    entering = first_count
    for target in schedule:
        total += _block_flops(entering + 1, d)
        entering = target
    return total


def count_flops(config: ApvitConfig, k: int | None = None, r: float | None = None) -> FlopsReport:
    """Analytic per-sample cost of one forward pass at the given pooling
    targets.  Matches the engine's instrumented counter exactly."""
    config.validate()
    s = config.stem
    d = config.embed_dim
    hw = s.patch_count
    per_stage: dict = {}

    side = s.input_side
    prev = s.input_channels
    stem_total = 0
    for ch in s.channels:
        stem_total += 2 * 9 * prev * ch * side * side
        side //= 2
        prev = ch
    per_stage["stem"] = stem_total

    if config.criterion is CriterionKind.LANET:
        hidden = s.out_channels // config.lanet_ratio
        per_stage["criterion"] = 2 * hw * s.out_channels * hidden + 2 * hw * hidden
    else:
        per_stage["criterion"] = 0

    if config.pooling_mode is PoolingMode.HARD:
        k_eff = config.k if k is None else k
    else:
        k_eff = hw
    r_eff = config.r if r is None else r
    per_stage["embed"] = 2 * s.out_channels * d * k_eff

    schedule = keep_schedule(k_eff, r_eff, config.blocks)
    entering = k_eff
    for i, target in enumerate(schedule):
        per_stage[f"block{i}"] = _block_flops(entering + 1, d)
        entering = target

    per_stage["head"] = 2 * d * config.num_classes

    total = sum(per_stage.values())
    transformer = _transformer_flops(schedule, k_eff, d)
    baseline = _transformer_flops((hw,) * config.blocks, hw, d)
    return FlopsReport(
        per_stage=per_stage,
        total=total,
        transformer=transformer,
        baseline_transformer=baseline,
        transformer_ratio=transformer / baseline,
        schedule=schedule,
    )


def measured_flops(config: ApvitConfig, seed: int = 0, k: int | None = None,
                   r: float | None = None) -> int:
    """Per-sample FLOPs reported by the engine's own counter."""
    params = init_params(config, seed)
    rng = np.random.default_rng(seed)
    image = rng.integers(
        0, 256, size=(1, config.stem.input_channels, config.stem.input_side, config.stem.input_side)
    ).astype(np.float64)
    counter = engine.MaddCounter()
    engine.forward_batch(image, params, config, k=k, r=r, counter=counter)
    return counter.flops


# ---------------------------------------------------------------------------
# gradient audit


@dataclass
class CoordCheck:
    param: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    combo: str
    seed: int
    tol: float
    coords: list
    max_rel_err: float
    failures: list
    atol: float = 1e-9

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(
    config: ApvitConfig,
    seed: int = 0,
    coords_per_param: int = 5,
    eps: float = 1e-5,
    tol: float = 1e-4,
    atol: float = 1e-9,
    batch: int = 2,
    gap_min: float = 1e-3,
    max_redraws: int = 20,
) -> GradCheckReport:
    """Central-difference audit of the full backward pass.

    Every parameter tensor gets ``coords_per_param`` sampled coordinates.
    Input batches whose selection margins are thinner than ``gap_min`` are
    redrawn, so the perturbation cannot flip a token choice and fake a
    gradient error.  Parameters off the gradient path (e.g. the learned
    criterion under hard selection) are audited too: both sides must be zero.

    Two difference-quotient artifacts are screened the way numeric gradient
    checkers usually do.  A coordinate whose analytic and numeric values
    agree within ``atol`` passes even when the relative error does not:
    near-zero gradients sit below the cancellation noise of the quotient.
    A coordinate that fails at ``eps`` is re-probed at ``eps/10`` and
    ``eps/100``: a stem ReLU or max-pool kink inside the perturbation window
    corrupts the quotient at one step size but drops out of a smaller
    window, while a wrong backward disagrees at every step size.
    """
    config.validate()
    params = init_params(config, seed)
    rng = np.random.default_rng(seed)
    s = config.stem
    for _ in range(max_redraws):
        images = rng.integers(
            0, 256, size=(batch, s.input_channels, s.input_side, s.input_side)
        ).astype(np.float64)
        labels = rng.integers(0, config.num_classes, size=batch)
        logits, cache, aux = engine.forward_batch(images, params, config)
        if not aux.selection_gaps or min(aux.selection_gaps) >= gap_min:
            break
    else:
        raise RuntimeError(
            f"no batch with selection margins >= {gap_min} in {max_redraws} draws"
        )
    loss, d_logits = cross_entropy(logits, labels)
    grads = engine.backward_batch(d_logits, params, cache)

    def loss_now() -> float:
        lg, _, _ = engine.forward_batch(images, params, config)
        return cross_entropy(lg, labels)[0]

    def numeric_at(flat: np.ndarray, j: int, step: float) -> float:
        orig = flat[j]
        flat[j] = orig + step
        hi = loss_now()
        flat[j] = orig - step
        lo = loss_now()
        flat[j] = orig
        return (hi - lo) / (2.0 * step)

    def rel_of(analytic: float, numeric: float) -> float:
        return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)

    coords: list = []
    for name, tensor in params.items():
        flat = tensor.reshape(-1)
        gflat = grads[name].reshape(-1)
        picks = rng.choice(flat.size, size=min(coords_per_param, flat.size), replace=False)
        for j in picks:
            analytic = float(gflat[j])
            numeric = numeric_at(flat, j, eps)
            rel = rel_of(analytic, numeric)
            for scale in (0.1, 0.01):
                if rel < tol or abs(analytic - numeric) < atol:
                    break
                retry = numeric_at(flat, j, eps * scale)
                if rel_of(analytic, retry) < rel:
                    numeric = retry
                    rel = rel_of(analytic, retry)
            coords.append(CoordCheck(name, int(j), analytic, numeric, rel))
    failures = [
        c
        for c in coords
        if c.rel_err >= tol and abs(c.analytic - c.numeric) >= atol
    ]
    return GradCheckReport(
        combo=f"{config.pooling_mode.value}/{config.criterion.value}",
        seed=seed,
        tol=tol,
        coords=coords,
        max_rel_err=max(c.rel_err for c in coords),
        failures=failures,
        atol=atol,
    )


# ---------------------------------------------------------------------------
# selection overlays


def render_overlay(image: np.ndarray, kept_cells, reduction: int) -> np.ndarray:
    """Copy of a [C, S, S] byte image with every dropped token cell painted
    white; kept cells keep their pixels."""
    if image.ndim != 3 or image.dtype != np.uint8:
        raise ValueError(f"expected uint8 [C, S, S], got {image.dtype} {image.shape}")
    side = image.shape[1]
    grid = side // reduction
    kept = set(int(i) for i in kept_cells)
    out = image.copy()
    for cell in range(grid * grid):
        if cell in kept:
            continue
        r0 = (cell // grid) * reduction
        c0 = (cell % grid) * reduction
        out[:, r0 : r0 + reduction, c0 : c0 + reduction] = 255
    return out


def dropped_occluder_overlap(kept_cells, occluders, side: int, reduction: int) -> float:
    """Fraction of dropped cells that an occluder touches.  Zero when nothing
    was dropped."""
    grid = side // reduction
    dropped = set(range(grid * grid)) - set(int(i) for i in kept_cells)
    if not dropped:
        return 0.0
    occluded = occluded_cells(occluders, side, reduction)
    return len(dropped & occluded) / len(dropped)
