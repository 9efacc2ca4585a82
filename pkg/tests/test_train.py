import json
from math import log

import numpy as np
import pytest

from apvit.data import generate_synthetic, SyntheticSpec
from apvit.model import ApvitConfig, PoolingMode, init_params
from apvit.stem import StemConfig
from apvit.train import (
    EvalResult,
    KrSchedule,
    TrainConfig,
    clip_gradients,
    cosine_lr,
    cross_entropy,
    evaluate,
    kr_targets,
    sgd_step,
    train_loop,
)


def tiny_config(**overrides):
    base = dict(
        stem=StemConfig(stages=2, channels=(4, 8), input_side=16),
        embed_dim=8, blocks=2, heads=2, k=12, r=1.0, num_classes=4,
    )
    base.update(overrides)
    return ApvitConfig(**base)


class TestCrossEntropy:
    def test_uniform_two_way_is_ln2(self):
        loss, d = cross_entropy(np.array([[0.0, 0.0]]), np.array([0]))
        assert abs(loss - log(2.0)) < 1e-15
        assert np.allclose(d, [[-0.5, 0.5]], atol=1e-15)

    def test_gradient_is_mean_softmax_minus_onehot(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((5, 3))
        labels = np.array([0, 2, 1, 1, 0])
        loss, d = cross_entropy(logits, labels)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        onehot = np.eye(3)[labels]
        assert np.allclose(d, (p - onehot) / 5, atol=1e-15)

    def test_confident_correct_prediction_is_cheap(self):
        loss, _ = cross_entropy(np.array([[30.0, 0.0, 0.0]]), np.array([0]))
        assert loss < 1e-12

    def test_extreme_logits_stay_finite(self):
        loss, d = cross_entropy(np.array([[1e4, 0.0]]), np.array([1]))
        assert np.isfinite(loss)
        assert np.all(np.isfinite(d))


class TestSchedules:
    def test_cosine_endpoints_and_midpoint(self):
        assert cosine_lr(0, 100, 0.4) == 0.4
        assert abs(cosine_lr(50, 100, 0.4) - 0.2) < 1e-15
        assert cosine_lr(100, 100, 0.4) < 1e-16

    def test_cosine_monotone_decreasing(self):
        values = [cosine_lr(s, 50, 1.0) for s in range(51)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_kr_anneal_endpoints_and_midpoint(self):
        cfg = tiny_config(
            stem=StemConfig(stages=2, channels=(4, 8), input_side=32),
            k=32, r=0.6, blocks=8,
        )
        assert kr_targets(0, 3, cfg) == (64, 1.0)
        k_mid, r_mid = kr_targets(1, 3, cfg)
        assert (k_mid, round(r_mid, 12)) == (48, 0.8)
        assert kr_targets(2, 3, cfg) == (32, 0.6)

    def test_single_step_run_sits_at_target(self):
        cfg = tiny_config(k=12, r=1.0)
        assert kr_targets(0, 1, cfg) == (12, 1.0)


class TestClip:
    def test_norm_above_threshold_rescales_jointly(self):
        grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
        norm = clip_gradients(grads, 2.5)
        assert norm == 5.0
        assert np.allclose(grads["a"], [1.5, 0.0])
        assert np.allclose(grads["b"], [[2.0]])
        total = sum((g * g).sum() for g in grads.values())
        assert abs(total**0.5 - 2.5) < 1e-12

    def test_norm_below_threshold_untouched(self):
        grads = {"a": np.array([0.3, 0.4])}
        norm = clip_gradients(grads, 10.0)
        assert abs(norm - 0.5) < 1e-15
        assert np.array_equal(grads["a"], [0.3, 0.4])


class TestSgd:
    def test_two_step_momentum_displacement(self):
        # constant unit gradient: v1 = 1, v2 = 1.9, total move 2.9 * lr
        params = {"embed.b": np.zeros(1)}
        velocity = {"embed.b": np.zeros(1)}
        for _ in range(2):
            sgd_step(params, {"embed.b": np.ones(1)}, velocity, lr=0.1,
                     momentum=0.9, weight_decay=0.0)
        assert abs(params["embed.b"][0] + 0.29) < 1e-15

    def test_weight_decay_exemptions(self):
        params = {"embed.w": np.ones((1, 1)), "final_ln.g": np.ones(1),
                  "cls_token": np.ones(1)}
        velocity = {n: np.zeros_like(w) for n, w in params.items()}
        zero_grads = {n: np.zeros_like(w) for n, w in params.items()}
        sgd_step(params, zero_grads, velocity, lr=1.0, momentum=0.0, weight_decay=0.1)
        assert params["embed.w"][0, 0] == 0.9  # decayed
        assert params["final_ln.g"][0] == 1.0  # exempt
        assert params["cls_token"][0] == 1.0  # exempt


class TestEvaluate:
    def test_forced_constant_prediction_fills_one_column(self):
        cfg = tiny_config()
        params = init_params(cfg, seed=0)
        params["head.w"][:] = 0.0
        params["head.b"][:] = 0.0
        params["head.b"][2] = 50.0
        rng = np.random.default_rng(1)
        images = rng.integers(0, 256, size=(20, 1, 16, 16)).astype(np.uint8)
        labels = np.array([i % 4 for i in range(20)])
        result = evaluate(params, cfg, images, labels)
        assert result.confusion[:, 2].sum() == 20
        assert result.confusion.sum() == 20
        assert result.overall_acc == 0.25
        assert np.array_equal(result.per_class_acc, [0.0, 0.0, 1.0, 0.0])
        assert result.mean_class_acc == 0.25

    def test_batching_does_not_change_counts(self):
        cfg = tiny_config()
        params = init_params(cfg, seed=3)
        rng = np.random.default_rng(2)
        images = rng.integers(0, 256, size=(10, 1, 16, 16)).astype(np.uint8)
        labels = rng.integers(0, 4, size=10)
        a = evaluate(params, cfg, images, labels, batch_size=3)
        b = evaluate(params, cfg, images, labels, batch_size=10)
        assert np.array_equal(a.confusion, b.confusion)


class TestTrainLoop:
    def make_data(self, n=48):
        spec = SyntheticSpec(side=16, train_count=n, test_count=16, data_seed=5,
                             occluder_count=0)
        train, test = generate_synthetic(spec)
        return train.images, train.labels, test.images, test.labels

    def test_history_and_metrics_lines(self, tmp_path):
        cfg = tiny_config()
        params = init_params(cfg, seed=1)
        xi, yi, xe, ye = self.make_data()
        tcfg = TrainConfig(base_lr=1e-3, batch_size=8, total_steps=6, seed=0,
                           eval_every=2)
        path = tmp_path / "metrics.jsonl"
        history = train_loop(params, cfg, tcfg, xi, yi, xe, ye, metrics_path=path)
        assert [h["step"] for h in history] == [2, 4, 6]
        lines = path.read_text().splitlines()
        assert len(lines) == 3
        for line, record in zip(lines, history):
            parsed = json.loads(line)
            assert parsed["step"] == record["step"]
            assert set(parsed) == {
                "step", "lr", "k_t", "r_t", "loss", "overall_acc",
                "mean_class_acc", "confusion",
            }
            assert len(parsed["confusion"]) == 16

    def test_loop_moves_parameters_and_reports_finite_loss(self):
        cfg = tiny_config()
        params = init_params(cfg, seed=2)
        before = {n: w.copy() for n, w in params.items()}
        xi, yi, _, _ = self.make_data()
        tcfg = TrainConfig(base_lr=1e-3, batch_size=8, total_steps=4, seed=1,
                           eval_every=10)
        history = train_loop(params, cfg, tcfg, xi, yi)
        assert len(history) == 1
        assert np.isfinite(history[0]["loss"])
        moved = [n for n in params if not np.array_equal(params[n], before[n])]
        assert "embed.w" in moved and "head.w" in moved

    def test_kr_schedule_annealing_recorded(self):
        cfg = tiny_config(k=8, r=0.5, blocks=2)
        params = init_params(cfg, seed=4)
        xi, yi, _, _ = self.make_data()
        tcfg = TrainConfig(base_lr=1e-4, batch_size=8, total_steps=5, seed=2,
                           eval_every=1, kr_schedule=KrSchedule.LINEAR_DECAY)
        history = train_loop(params, cfg, tcfg, xi, yi)
        assert history[0]["k_t"] == 16  # full grid at step 0
        assert history[-1]["k_t"] == 8
        assert history[-1]["r_t"] == 0.5

    def test_divergence_aborts_with_step_number(self):
        cfg = tiny_config()
        params = init_params(cfg, seed=5)
        params["head.b"][0] = np.inf
        xi, yi, _, _ = self.make_data()
        tcfg = TrainConfig(base_lr=1e-3, batch_size=8, total_steps=3, seed=0)
        with pytest.raises(FloatingPointError, match="step 0"):
            train_loop(params, cfg, tcfg, xi, yi)

    def test_rejects_batch_larger_than_dataset(self):
        cfg = tiny_config()
        params = init_params(cfg, seed=6)
        xi, yi, _, _ = self.make_data(n=4)
        tcfg = TrainConfig(batch_size=8, total_steps=1)
        with pytest.raises(ValueError):
            train_loop(params, cfg, tcfg, xi, yi)

    def test_memorizes_a_small_batch(self):
        cfg = tiny_config(embed_dim=16, k=16)
        params = init_params(cfg, seed=7)
        xi, yi, _, _ = self.make_data(n=32)
        tcfg = TrainConfig(base_lr=3e-3, batch_size=32, total_steps=800, seed=3,
                           eval_every=100, weight_decay=0.0)
        history = train_loop(params, cfg, tcfg, xi, yi, xi, yi)
        assert history[-1]["loss"] < 0.05, [h["loss"] for h in history]
        assert history[-1]["overall_acc"] == 1.0


class TestConfigValidation:
    def test_bad_values_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(base_lr=0.0).validate()
        with pytest.raises(ValueError):
            TrainConfig(momentum=1.0).validate()
        with pytest.raises(ValueError):
            TrainConfig(clip_norm=0.0).validate()
        with pytest.raises(ValueError):
            TrainConfig(total_steps=0).validate()
