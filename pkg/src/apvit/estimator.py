"""scikit-learn estimator facade over the model and training loop.

``APViTClassifier`` follows the fit/predict contract: hyperparameters are
constructor arguments stored verbatim, fitted state lives in trailing
underscore attributes, labels can be anything ``np.unique`` sorts.  Inputs
are byte images, either [n, C, S, S] or flattened [n, C*S*S].
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from . import engine
from .encoder import AtpVariant
from .model import ApvitConfig, HeadKind, PoolingMode, init_params
from .pooling import CriterionKind
from .stem import StemConfig
from .train import KrSchedule, TrainConfig, train_loop


class APViTClassifier(BaseEstimator, ClassifierMixin):
    """Hybrid CNN/transformer image classifier with attentive patch and token
    pooling, trained by SGD with momentum."""

    def __init__(
        self,
        embed_dim: int = 64,
        blocks: int = 8,
        heads: int = 4,
        k: int = 48,
        r: float = 0.8,
        criterion: str = "abs",
        atp_variant: str = "sum",
        pooling_mode: str = "hard",
        head: str = "clt",
        stem_channels: tuple = (16, 32),
        input_side: int = 32,
        input_channels: int = 1,
        lanet_ratio: int = 8,
        linear_tap: bool = True,
        base_lr: float = 1e-3,
        momentum: float = 0.9,
        weight_decay: float = 5e-4,
        clip_norm: float = 10.0,
        batch_size: int = 32,
        total_steps: int = 600,
        eval_every: int = 100,
        kr_schedule: str = "constant",
        seed: int = 0,
    ):
        self.embed_dim = embed_dim
        self.blocks = blocks
        self.heads = heads
        self.k = k
        self.r = r
        self.criterion = criterion
        self.atp_variant = atp_variant
        self.pooling_mode = pooling_mode
        self.head = head
        self.stem_channels = stem_channels
        self.input_side = input_side
        self.input_channels = input_channels
        self.lanet_ratio = lanet_ratio
        self.linear_tap = linear_tap
        self.base_lr = base_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.batch_size = batch_size
        self.total_steps = total_steps
        self.eval_every = eval_every
        self.kr_schedule = kr_schedule
        self.seed = seed

    def _build_config(self, num_classes: int) -> ApvitConfig:
        return ApvitConfig(
            stem=StemConfig(
                stages=len(self.stem_channels),
                channels=tuple(self.stem_channels),
                input_side=self.input_side,
                input_channels=self.input_channels,
            ),
            embed_dim=self.embed_dim,
            blocks=self.blocks,
            heads=self.heads,
            k=self.k,
            r=self.r,
            criterion=CriterionKind(self.criterion),
            atp_variant=AtpVariant(self.atp_variant),
            pooling_mode=PoolingMode(self.pooling_mode),
            head=HeadKind(self.head),
            num_classes=num_classes,
            lanet_ratio=self.lanet_ratio,
            linear_tap=self.linear_tap,
        )

    def _as_images(self, X) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float64)
        shape = (self.input_channels, self.input_side, self.input_side)
        if X.ndim == 2 and X.shape[1] == int(np.prod(shape)):
            X = X.reshape(len(X), *shape)
        if X.ndim != 4 or X.shape[1:] != shape:
            raise ValueError(
                f"X must be [n, {shape[0]}, {shape[1]}, {shape[2]}] images "
                f"or flat rows of {int(np.prod(shape))} values, got {X.shape}"
            )
        if X.min() < 0 or X.max() > 255:
            raise ValueError("pixel values must lie in [0, 255]")
        return X

    def fit(self, X, y):
        X = self._as_images(X)
        y = column_or_1d(y)
        if len(X) != len(y):
            raise ValueError(f"{len(X)} images but {len(y)} labels")
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes to fit")
        encoded = np.searchsorted(self.classes_, y)
        config = self._build_config(int(self.classes_.size))
        config.validate()
        params = init_params(config, self.seed)
        tcfg = TrainConfig(
            base_lr=self.base_lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            clip_norm=self.clip_norm,
            batch_size=min(self.batch_size, len(X)),
            total_steps=self.total_steps,
            seed=self.seed,
            kr_schedule=KrSchedule(self.kr_schedule),
            eval_every=self.eval_every,
        )
        self.history_ = train_loop(params, config, tcfg, X.astype(np.uint8), encoded)
        self.config_ = config
        self.params_ = params
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = self._as_images(X)
        out = np.empty((len(X), self.config_.num_classes))
        for start in range(0, len(X), 64):
            chunk = X[start : start + 64]
            logits, _, _ = engine.forward_batch(chunk, self.params_, self.config_)
            out[start : start + len(chunk)] = logits
        return out

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]
