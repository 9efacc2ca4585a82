import numpy as np
import pytest

from apvit.encoder import (
    AtpVariant,
    AttnRecord,
    TokenSeq,
    atp_scores,
    atp_select,
    block_forward,
    encoder_forward,
    keep_schedule,
    msa_forward,
)
from apvit.model import ApvitConfig, init_params
from apvit.stem import StemConfig


def tiny_params(d=8, heads=2, blocks=2, patches=4, seed=0):
    cfg = ApvitConfig(
        stem=StemConfig(stages=2, channels=(4, d), input_side=16),
        embed_dim=d, blocks=blocks, heads=heads, k=patches, r=1.0, num_classes=2,
    )
    return init_params(cfg, seed)


def random_seq(patches, d, seed=0):
    rng = np.random.default_rng(seed)
    return TokenSeq(rng.standard_normal((patches + 1, d)), np.arange(patches))


class TestTokenSeq:
    def test_validation(self):
        with pytest.raises(ValueError):
            TokenSeq(np.zeros((3, 4, 5)), np.arange(2))
        with pytest.raises(ValueError):
            TokenSeq(np.zeros((3, 4)), np.arange(3))
        seq = TokenSeq(np.zeros((3, 4)), np.array([7, 2]))
        assert seq.patch_count == 2

    def test_class_only_sequence_is_legal(self):
        seq = TokenSeq(np.zeros((1, 4)), np.arange(0))
        assert seq.patch_count == 0


class TestScores:
    def test_frozen_head_reductions(self):
        record = AttnRecord(np.array([[1.0, -1.0], [2.0, 3.0]]))
        assert np.array_equal(atp_scores(record, AtpVariant.SUM), [3.0, 2.0])
        assert np.array_equal(atp_scores(record, AtpVariant.ABS), [3.0, 4.0])
        assert np.array_equal(atp_scores(record, AtpVariant.MAX), [2.0, 3.0])

    def test_sum_is_default(self):
        record = AttnRecord(np.array([[1.0, 0.0], [0.5, 2.0]]))
        assert np.array_equal(atp_scores(record), [1.5, 2.0])


class TestSelect:
    def test_frozen_selection(self):
        seq = TokenSeq(np.arange(25.0).reshape(5, 5), np.array([10, 11, 12, 13]))
        kept = atp_select(seq, np.array([0.3, 0.9, 0.9, 0.1]), 2)
        assert np.array_equal(kept.kept_patch_ids, [11, 12])
        assert np.array_equal(kept.tokens[0], seq.tokens[0])  # class row survives
        assert np.array_equal(kept.tokens[1], seq.tokens[2])
        assert np.array_equal(kept.tokens[2], seq.tokens[3])

    def test_order_preserved_under_ties(self):
        seq = random_seq(5, 3, seed=1)
        kept = atp_select(seq, np.zeros(5), 3)
        assert np.array_equal(kept.kept_patch_ids, [0, 1, 2])

    def test_bounds(self):
        seq = random_seq(3, 4)
        with pytest.raises(ValueError):
            atp_select(seq, np.zeros(3), 0)
        with pytest.raises(ValueError):
            atp_select(seq, np.zeros(3), 4)
        with pytest.raises(ValueError):
            atp_select(seq, np.zeros(2), 1)


class TestSchedule:
    def test_frozen_paper_scale(self):
        assert keep_schedule(160, 0.9, 8) == (160, 160, 160, 160, 144, 129, 116, 104)

    def test_frozen_desk_scales(self):
        assert keep_schedule(80, 0.6, 8) == (80, 80, 80, 80, 48, 28, 16, 9)
        assert keep_schedule(40, 0.6, 8) == (40, 40, 40, 40, 24, 14, 8, 4)

    def test_r_one_is_constant(self):
        assert keep_schedule(17, 1.0, 6) == (17,) * 6

    def test_rejects_odd_or_tiny_block_counts(self):
        with pytest.raises(ValueError):
            keep_schedule(10, 0.5, 7)
        with pytest.raises(ValueError):
            keep_schedule(10, 0.5, 0)

    def test_rejects_schedule_reaching_zero(self):
        with pytest.raises(ValueError):
            keep_schedule(4, 0.1, 8)

    def test_floor_on_ieee_product(self):
        # 0.29 * 100 = 28.999999999999996 in doubles, so the floor is 28, not 29
        assert keep_schedule(100, 0.29, 2) == (100, 28)


class TestBlocks:
    def test_zeroed_block_is_identity(self):
        params = tiny_params(seed=3)
        for name in list(params):
            if ".attn." in name or ".mlp." in name:
                params[name] = np.zeros_like(params[name])
        seq = random_seq(4, 8, seed=5)
        out, record = block_forward(seq, params, "block0", heads=2)
        assert np.array_equal(out.tokens, seq.tokens)
        assert record.class_logits.shape == (2, 4)
        assert not record.class_logits.any()

    def test_record_matches_direct_dot_products(self):
        params = tiny_params(seed=9)
        seq = random_seq(4, 8, seed=2)
        _, record = msa_forward(seq.tokens, params, "block0", heads=2)
        # recompute the class row with plain loops
        x = seq.tokens
        mu = x.mean(axis=1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
        xn = (x - mu) / np.sqrt(var + 1e-5) * params["block0.ln1.g"] + params["block0.ln1.b"]
        q = xn @ params["block0.attn.wq"]
        kk = xn @ params["block0.attn.wk"]
        dh = 4
        for h in range(2):
            for j in range(4):
                manual = q[0, h * dh : (h + 1) * dh] @ kk[j + 1, h * dh : (h + 1) * dh] / np.sqrt(dh)
                assert abs(record.class_logits[h, j] - manual) < 1e-12

    def test_class_only_block_runs(self):
        params = tiny_params(seed=4)
        seq = TokenSeq(np.random.default_rng(0).standard_normal((1, 8)), np.arange(0))
        out, record = block_forward(seq, params, "block0", heads=2)
        assert out.tokens.shape == (1, 8)
        assert record.class_logits.shape == (2, 0)


class TestEncoderForward:
    def test_trail_lengths_follow_schedule(self):
        params = tiny_params(blocks=2, seed=6)
        seq = random_seq(4, 8, seed=7)
        final, trail = encoder_forward(seq, params, heads=2, schedule=(4, 2))
        assert [len(t) for t in trail] == [4, 2]
        assert final.patch_count == 2
        assert final.tokens.shape == (3, 8)

    def test_zero_query_ties_keep_first_tokens(self):
        params = tiny_params(blocks=2, seed=8)
        for i in range(2):
            params[f"block{i}.attn.wq"] = np.zeros((8, 8))
        seq = random_seq(4, 8, seed=9)
        _, trail = encoder_forward(seq, params, heads=2, schedule=(4, 2))
        assert np.array_equal(trail[1], [0, 1])

    def test_schedule_must_fit_sequence(self):
        params = tiny_params(blocks=2, seed=1)
        seq = random_seq(3, 8, seed=1)
        with pytest.raises(ValueError):
            encoder_forward(seq, params, heads=2, schedule=(4, 4))

    def test_ids_survive_through_pooling(self):
        params = tiny_params(blocks=4, patches=6, seed=12)
        rng = np.random.default_rng(13)
        seq = TokenSeq(rng.standard_normal((7, 8)), np.array([3, 9, 11, 20, 21, 40]))
        final, trail = encoder_forward(seq, params, heads=2, schedule=(6, 6, 3, 1))
        assert set(trail[2]) <= {3, 9, 11, 20, 21, 40}
        assert set(trail[3]) <= set(trail[2])
        assert final.patch_count == 1
