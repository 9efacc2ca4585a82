"""End-to-end acceptance checks.

Each test covers one numbered claim about the finished system, from frozen
token-count arithmetic through desk-scale training behavior, and prints one
``ACCEPTANCE <n> ...: PASS`` line with its evidence (run pytest with ``-s``
to see them; ``-v`` shows the per-test verdicts either way).  The training
checks share one session fixture so the expensive runs happen once.
"""

import dataclasses
import time

import numpy as np
import pytest

from apvit import engine
from apvit.analysis import count_flops, grad_check, measured_flops
from apvit.data import SyntheticSpec, generate_synthetic, occluded_cells
from apvit.encoder import TokenSeq, atp_select, keep_schedule
from apvit.model import (
    ApvitConfig,
    PoolingMode,
    init_params,
    save_checkpoint,
)
from apvit.pooling import CriterionKind, select_top_k
from apvit.train import TrainConfig, evaluate, train_loop

# the desk-scale model every check runs against: 32px grey input, two-stage
# stem to an 8x8 grid of 32-channel cells, 8 blocks of width 64 with 4 heads,
# patch pooling to k=48 and token keep rate r=0.8
DESK = ApvitConfig()

# settings for the training-based checks, tuned during bring-up: the task is
# learnable to ~100% test accuracy within ~400 steps at this rate
TRAIN_STEPS = 400
TRAIN_LR = 3e-3
TRAIN_BATCH = 32


def report(n: int, name: str, detail: str) -> None:
    print(f"\nACCEPTANCE {n} {name}: PASS ({detail})")


def oracle_top_k(scores, k):
    """Rank by descending score with index as tie-break, then sort the
    winners: the slow, obviously-correct selection everything must match."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(order[:k])


def test_01_reserved_token_counts():
    t0 = time.perf_counter()
    cases = {(160, 0.9, 8): 105, (80, 0.6, 8): 10, (40, 0.6, 8): 5}
    got = {}
    for (k, r, m), want in cases.items():
        schedule = keep_schedule(k, r, m)
        got[(k, r, m)] = schedule[-1] + 1  # surviving patches + class token
        assert got[(k, r, m)] == want, f"{(k, r, m)}: {got[(k, r, m)]} != {want}"
    ms = (time.perf_counter() - t0) * 1e3
    report(1, "reserved token counts", f"{sorted(got.values())} == [5, 10, 105], {ms:.2f} ms")


def test_02_final_count_approximation():
    exact = keep_schedule(160, 0.9, 8)[-1]
    formula = 160 * 0.9 ** 4
    assert abs(exact - formula) < 1.0
    report(2, "half-depth decay approximation", f"|{exact} - {formula:.3f}| = {abs(exact - formula):.3f} < 1")


def test_03_gradient_audit_all_combos():
    t0 = time.perf_counter()
    worst = 0.0
    combos = 0
    for mode in PoolingMode:
        for criterion in CriterionKind:
            cfg = dataclasses.replace(DESK, pooling_mode=mode, criterion=criterion)
            rep = grad_check(cfg, seed=0, coords_per_param=3, eps=1e-5, tol=1e-4)
            assert rep.passed, (
                f"{rep.combo}: {len(rep.failures)} of {len(rep.coords)} coordinates "
                f"failed, worst rel err {rep.max_rel_err:.2e}"
            )
            worst = max(worst, rep.max_rel_err)
            combos += 1
    elapsed = time.perf_counter() - t0
    assert combos == 12
    assert elapsed < 300.0, f"audit took {elapsed:.0f}s, budget is 300s"
    report(3, "gradient audit", f"12 pooling x criterion combos, worst rel err {worst:.1e}, {elapsed:.0f}s")


def test_04_selection_matches_sort_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    for _ in range(1000):
        h, w, c = int(rng.integers(2, 7)), int(rng.integers(2, 7)), 3
        k = int(rng.integers(1, h * w + 1))
        fmap = rng.normal(size=(c, h, w))
        attn = np.round(rng.normal(size=(h, w)), 1)  # coarse values force ties
        sel, _ = select_top_k(fmap, attn, k)
        want = oracle_top_k(list(attn.reshape(-1)), k)
        assert list(sel.indices) == want
        assert np.array_equal(sel.tokens, fmap.reshape(c, h * w).T[want])
    for _ in range(1000):
        t = int(rng.integers(1, 30))
        keep = int(rng.integers(1, t + 1))
        seq = TokenSeq(
            tokens=rng.normal(size=(t + 1, 4)),
            kept_patch_ids=np.sort(rng.choice(100, size=t, replace=False)),
        )
        scores = np.round(rng.normal(size=t), 1)
        out = atp_select(seq, scores, keep)
        want = oracle_top_k(list(scores), keep)
        assert list(out.kept_patch_ids) == list(seq.kept_patch_ids[want])
        assert np.array_equal(out.tokens[1:], seq.tokens[1:][want])
        assert np.array_equal(out.tokens[0], seq.tokens[0])
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0
    report(4, "selection vs sort oracle", f"1000 patch + 1000 token selections exact, {elapsed:.1f}s")


def test_05_full_keep_equals_no_pooling():
    t0 = time.perf_counter()
    hw = DESK.stem.patch_count
    hard_full = dataclasses.replace(DESK, k=hw, r=1.0)
    none_cfg = dataclasses.replace(DESK, pooling_mode=PoolingMode.NONE, r=1.0)
    side = DESK.stem.input_side
    for seed in range(20):
        params = init_params(DESK, seed)
        rng = np.random.default_rng(seed)
        image = rng.integers(0, 256, size=(1, 1, side, side)).astype(np.float64)
        a, _, _ = engine.forward_batch(image, params, hard_full)
        b, _, _ = engine.forward_batch(image, params, none_cfg)
        assert np.array_equal(a, b), f"seed {seed}: max abs err {np.abs(a - b).max():.3e}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0
    report(5, "keep-everything degeneration", f"20 seeds, abs err 0, {elapsed:.1f}s")


def test_06_flops_model_matches_counter():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    hw = DESK.stem.patch_count
    for _ in range(5):
        k = int(rng.integers(8, hw + 1))
        r = float(rng.uniform(0.5, 1.0))
        analytic = count_flops(DESK, k=k, r=r).total
        counted = measured_flops(DESK, seed=0, k=k, r=r)
        assert analytic == counted, f"k={k} r={r}: {analytic} != {counted}"
    ks = (16, 28, 40, 52, 64)
    rs = (0.6, 0.7, 0.8, 0.9, 1.0)
    grid = {(k, r): count_flops(DESK, k=k, r=r).transformer_ratio for k in ks for r in rs}
    for i, k in enumerate(ks):
        for j, r in enumerate(rs):
            if i + 1 < len(ks):
                assert grid[(k, r)] <= grid[(ks[i + 1], r)], f"ratio not monotone in k at r={r}"
            if j + 1 < len(rs):
                assert grid[(k, r)] <= grid[(k, rs[j + 1])], f"ratio not monotone in r at k={k}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    report(6, "cost model vs instrumented counter", f"5 exact matches, 5x5 ratio grid monotone, {elapsed:.1f}s")


def test_07_flops_ordering_of_pooling_stages():
    both = count_flops(DESK).transformer_ratio
    app_only = count_flops(DESK, r=1.0).transformer_ratio
    atp_only = count_flops(dataclasses.replace(DESK, pooling_mode=PoolingMode.NONE)).transformer_ratio
    assert atp_only > app_only > both, f"got atp={atp_only:.3f} app={app_only:.3f} both={both:.3f}"
    report(
        7,
        "pooling-stage cost ordering",
        f"token-only {atp_only:.3f} > patch-only {app_only:.3f} > both {both:.3f}",
    )


@pytest.fixture(scope="session")
def desk_runs():
    """Train the unpooled baseline and the pooled model once, on the standard
    2400/800 synthetic split, and share the results with every check below."""
    t0 = time.perf_counter()
    train, test = generate_synthetic(SyntheticSpec())
    out = {"test": test}
    for name, cfg in (
        ("baseline", dataclasses.replace(DESK, pooling_mode=PoolingMode.NONE, r=1.0)),
        ("pooled", DESK),
    ):
        cfg.validate()
        params = init_params(cfg, 0)
        tcfg = TrainConfig(
            base_lr=TRAIN_LR,
            total_steps=TRAIN_STEPS,
            batch_size=TRAIN_BATCH,
            eval_every=TRAIN_STEPS,
            seed=0,
        )
        train_loop(params, cfg, tcfg, train.images, train.labels)
        out[name] = (params, cfg, evaluate(params, cfg, test.images, test.labels))
    out["elapsed"] = time.perf_counter() - t0
    return out


def test_08_desk_scale_learning(desk_runs):
    _, _, base_res = desk_runs["baseline"]
    _, pooled_cfg, pooled_res = desk_runs["pooled"]
    ratio = count_flops(pooled_cfg).transformer_ratio
    elapsed = desk_runs["elapsed"]
    assert TRAIN_STEPS <= 3000
    assert base_res.overall_acc >= 0.90, f"baseline reached only {base_res.overall_acc:.4f}"
    assert pooled_res.overall_acc >= base_res.overall_acc - 0.02, (
        f"pooled {pooled_res.overall_acc:.4f} vs baseline {base_res.overall_acc:.4f}"
    )
    assert ratio <= 0.75, f"transformer cost ratio {ratio:.3f} > 0.75"
    assert elapsed < 900.0, f"training took {elapsed:.0f}s, budget is 900s"
    report(
        8,
        "desk-scale learning",
        f"baseline {base_res.overall_acc:.4f}, pooled {pooled_res.overall_acc:.4f}, "
        f"cost ratio {ratio:.3f}, {TRAIN_STEPS} steps each, {elapsed:.0f}s",
    )


def test_09_dropped_cells_hit_occluders(desk_runs):
    t0 = time.perf_counter()
    params, cfg, _ = desk_runs["pooled"]
    test = desk_runs["test"]
    reduction = cfg.stem.reduction
    hw = cfg.stem.patch_count
    side = cfg.stem.input_side
    total_area = side * side
    dropped_total = 0
    hits = 0
    for start in range(0, 200, 50):
        chunk = test.samples[start : start + 50]
        images = np.stack([s.image for s in chunk]).astype(np.float64)
        _, _, aux = engine.forward_batch(images, params, cfg)
        for i, sample in enumerate(chunk):
            area = sum(h * w for _, _, h, w in sample.occluders)
            assert area < 0.25 * total_area
            dropped = set(range(hw)) - set(int(x) for x in aux.app_indices[i])
            occluded = occluded_cells(sample.occluders, side, reduction)
            dropped_total += len(dropped)
            hits += len(dropped & occluded)
    fraction = hits / dropped_total
    elapsed = time.perf_counter() - t0
    assert fraction >= 0.60, f"only {fraction:.3f} of dropped cells touch an occluder"
    assert elapsed < 120.0
    report(
        9,
        "dropped cells sit on occluders",
        f"{hits}/{dropped_total} = {fraction:.3f} over 200 images, {elapsed:.1f}s",
    )


def test_10_run_to_run_determinism(tmp_path):
    t0 = time.perf_counter()
    spec = SyntheticSpec(train_count=128, test_count=32)
    artifacts = []
    for run in range(2):
        train, test = generate_synthetic(spec)
        params = init_params(DESK, 0)
        tcfg = TrainConfig(total_steps=12, batch_size=16, eval_every=6, seed=0)
        metrics = tmp_path / f"metrics{run}.jsonl"
        train_loop(
            params, DESK, tcfg, train.images, train.labels,
            test.images, test.labels, metrics_path=metrics,
        )
        ckpt = tmp_path / f"model{run}.ckpt"
        save_checkpoint(ckpt, params)
        artifacts.append((ckpt.read_bytes(), metrics.read_bytes()))
    assert artifacts[0][0] == artifacts[1][0], "checkpoints differ between identical runs"
    assert artifacts[0][1] == artifacts[1][1], "metrics files differ between identical runs"
    elapsed = time.perf_counter() - t0
    assert elapsed < 900.0
    report(
        10,
        "run-to-run determinism",
        f"checkpoint {len(artifacts[0][0])} bytes and metrics byte-identical, {elapsed:.0f}s",
    )
