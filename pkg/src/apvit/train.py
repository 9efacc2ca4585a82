"""Training loop: SGD with momentum, weight decay (LayerNorm parameters and
the class token exempt), global-norm gradient clipping, cosine learning-rate
decay, and an optional linear anneal of the pooling targets from the full
grid down to the configured (k, r).

Evaluation always runs at the final pooling targets with no augmentation;
training batches are always augmented.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from math import cos, pi

import numpy as np

from . import engine
from .data import augment_batch
from .model import ApvitConfig, PoolingMode, is_decay_exempt


class KrSchedule(Enum):
    CONSTANT = "constant"
    LINEAR_DECAY = "linear-decay"


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    clip_norm: float = 10.0
    batch_size: int = 32
    total_steps: int = 1000
    seed: int = 0
    kr_schedule: KrSchedule = KrSchedule.CONSTANT
    eval_every: int = 100

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0 or self.clip_norm <= 0:
            raise ValueError("weight_decay must be >= 0 and clip_norm > 0")
        if self.batch_size < 1 or self.total_steps < 1 or self.eval_every < 1:
            raise ValueError("batch_size, total_steps, eval_every must be positive")


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch.  Returns (loss, d_logits) with the
    gradient already divided by the batch size."""
    b = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    # log-probs directly from shifted logits: stays finite when a class
    # prob underflows to zero
    log_probs = shifted - np.log(z)
    loss = float(-log_probs[np.arange(b), labels].mean())
    d_logits = e / z
    d_logits[np.arange(b), labels] -= 1.0
    return loss, d_logits / b


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * 0.5 * (1 + cos(pi * step / total_steps))."""
    return base_lr * 0.5 * (1.0 + cos(pi * step / total_steps))


def kr_targets(step: int, total_steps: int, config: ApvitConfig):
    """Linear anneal from (full grid, 1.0) at step 0 to (k, r) at the last
    step; the k target rounds to the nearest integer."""
    hw = config.stem.patch_count
    frac = 1.0 if total_steps <= 1 else step / (total_steps - 1)
    k_t = int(round(hw + frac * (config.k - hw)))
    r_t = 1.0 + frac * (config.r - 1.0)
    return k_t, r_t


def clip_gradients(grads: dict, clip_norm: float) -> float:
    """Joint L2 clipping across all tensors, in place.  Returns the
    pre-clip global norm."""
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = total**0.5
    if norm > clip_norm:
        scale = clip_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float,
             momentum: float, weight_decay: float) -> None:
    """v <- m*v + (g + wd*w); w <- w - lr*v, skipping decay for exempt names."""
    for name, w in params.items():
        g = grads[name]
        if weight_decay and not is_decay_exempt(name):
            g = g + weight_decay * w
        velocity[name] = momentum * velocity[name] + g
        w -= lr * velocity[name]


@dataclass
class EvalResult:
    overall_acc: float
    per_class_acc: np.ndarray
    mean_class_acc: float
    confusion: np.ndarray  # [num_classes, num_classes] ints, rows = true


def evaluate(params: dict, config: ApvitConfig, images: np.ndarray,
             labels: np.ndarray, batch_size: int = 64) -> EvalResult:
    """Accuracy at the configured pooling targets, no augmentation."""
    n = images.shape[0]
    confusion = np.zeros((config.num_classes, config.num_classes), dtype=np.int64)
    for start in range(0, n, batch_size):
        chunk = images[start : start + batch_size]
        logits, _, _ = engine.forward_batch(chunk.astype(np.float64), params, config)
        preds = np.argmax(logits, axis=1)
        for t, p in zip(labels[start : start + batch_size], preds):
            confusion[t, p] += 1
    support = confusion.sum(axis=1)
    correct = np.diag(confusion)
    overall = float(correct.sum() / max(n, 1))
    present = support > 0
    per_class = np.zeros(config.num_classes)
    per_class[present] = correct[present] / support[present]
    mean_class = float(per_class[present].mean()) if present.any() else 0.0
    return EvalResult(overall, per_class, mean_class, confusion)


def train_loop(
    params: dict,
    config: ApvitConfig,
    tcfg: TrainConfig,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    eval_images: np.ndarray | None = None,
    eval_labels: np.ndarray | None = None,
    metrics_path=None,
) -> list:
    """Run SGD for ``tcfg.total_steps`` steps, mutating ``params`` in place.

    Every ``eval_every`` steps (and at the end) an evaluation record is
    appended to the returned history and, if ``metrics_path`` is given,
    written as one JSON line.  ``loss`` in a record is the mean training
    loss since the previous record.  Raises FloatingPointError if the loss
    stops being finite.
    """
    config.validate()
    tcfg.validate()
    n = train_images.shape[0]
    if n < tcfg.batch_size:
        raise ValueError(f"{n} training samples < batch size {tcfg.batch_size}")
    rng = np.random.default_rng(tcfg.seed)
    velocity = {name: np.zeros_like(w) for name, w in params.items()}
    history = []
    loss_sum, loss_count = 0.0, 0
    sink = open(metrics_path, "w") if metrics_path is not None else None
    try:
        for step in range(tcfg.total_steps):
            lr = cosine_lr(step, tcfg.total_steps, tcfg.base_lr)
            if tcfg.kr_schedule is KrSchedule.LINEAR_DECAY:
                k_t, r_t = kr_targets(step, tcfg.total_steps, config)
            else:
                k_t, r_t = config.k, config.r
            batch = rng.choice(n, size=tcfg.batch_size, replace=False)
            images = augment_batch(train_images[batch], rng).astype(np.float64)
            k_arg = k_t if config.pooling_mode is PoolingMode.HARD else None
            logits, cache, _ = engine.forward_batch(
                images, params, config, k=k_arg, r=r_t
            )
            loss, d_logits = cross_entropy(logits, train_labels[batch])
            if not np.isfinite(loss):
                raise FloatingPointError(f"training loss diverged at step {step}")
            grads = engine.backward_batch(d_logits, params, cache)
            clip_gradients(grads, tcfg.clip_norm)
            sgd_step(params, grads, velocity, lr, tcfg.momentum, tcfg.weight_decay)
            loss_sum += loss
            loss_count += 1
            last = step == tcfg.total_steps - 1
            if (step + 1) % tcfg.eval_every == 0 or last:
                record = {
                    "step": step + 1,
                    "lr": lr,
                    "k_t": k_t,
                    "r_t": r_t,
                    "loss": loss_sum / loss_count,
                }
                if eval_images is not None:
                    result = evaluate(params, config, eval_images, eval_labels)
                    record["overall_acc"] = result.overall_acc
                    record["mean_class_acc"] = result.mean_class_acc
                    record["confusion"] = [int(x) for x in result.confusion.reshape(-1)]
                history.append(record)
                if sink is not None:
                    sink.write(json.dumps(record) + "\n")
                    sink.flush()
                loss_sum, loss_count = 0.0, 0
    finally:
        if sink is not None:
            sink.close()
    return history
