"""Convolutional stem: byte-image normalization and a small stack of
conv3x3 -> maxpool2x2 -> ReLU stages that turns a [Cin, S, S] image into the
patch-feature grid the transformer consumes.

Each stage is computed conv -> maxpool -> ReLU.  ReLU is monotone, so this is
bit-identical to conv -> ReLU -> maxpool while making the pre-activation map
available at the pooled (token-grid) resolution: that map is the "linear tap"
the patch-scoring criteria read, where positive and negative responses still
differ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops


@dataclass(frozen=True)
class StemConfig:
    stages: int = 2
    channels: tuple[int, ...] = (16, 32)
    input_side: int = 32
    input_channels: int = 1

    def validate(self) -> None:
        if self.stages < 1:
            raise ValueError(f"stages must be >= 1, got {self.stages}")
        if len(self.channels) != self.stages:
            raise ValueError(
                f"channels {self.channels} must list one width per stage ({self.stages})"
            )
        if any(c < 1 for c in self.channels):
            raise ValueError(f"channel widths must be positive, got {self.channels}")
        if self.input_channels < 1:
            raise ValueError(f"input_channels must be >= 1, got {self.input_channels}")
        if self.input_side % self.reduction != 0:
            raise ValueError(
                f"input side {self.input_side} not divisible by stem reduction {self.reduction}"
            )

    @property
    def reduction(self) -> int:
        """Spatial shrink factor: one 2x2 pool per stage."""
        return 2**self.stages

    @property
    def grid_side(self) -> int:
        return self.input_side // self.reduction

    @property
    def patch_count(self) -> int:
        return self.grid_side * self.grid_side

    @property
    def out_channels(self) -> int:
        return self.channels[-1]


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Map byte values to [-1, 1] via (x/255 - 0.5)/0.5."""
    x = np.asarray(image, dtype=np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 255.0):
        raise ValueError("image values must lie in [0, 255]")
    return (x / 255.0 - 0.5) / 0.5


def stem_forward(x: np.ndarray, params: dict, config: StemConfig):
    """Run the stem on one normalized [Cin, S, S] tensor.

    Returns (features, tap, backward): ``features`` is the post-ReLU
    [C, grid, grid] map whose cells become patch tokens, ``tap`` the pre-ReLU
    map at the same resolution, and ``backward(d_features, d_tap)`` yields
    (d_x, grads-by-name).
    """
    if x.shape != (config.input_channels, config.input_side, config.input_side):
        raise ValueError(
            f"stem expects {(config.input_channels, config.input_side, config.input_side)}, got {x.shape}"
        )
    cur = x
    stage_backwards = []
    pre_act = None
    for i in range(config.stages):
        w = params[f"stem.conv{i}.w"]
        b = params[f"stem.conv{i}.b"]
        z, conv_bwd = ops.conv2d(cur, w, stride=1, pad=1)
        z = z + b[:, None, None]
        pre_act, pool_bwd = ops.max_pool2d(z, size=2, stride=2)
        cur, relu_bwd = ops.relu(pre_act)
        stage_backwards.append((conv_bwd, pool_bwd, relu_bwd))
    features = cur
    tap = pre_act

    def backward(d_features: np.ndarray, d_tap: np.ndarray | None = None):
        grads: dict[str, np.ndarray] = {}
        d_cur = d_features
        for i in reversed(range(config.stages)):
            conv_bwd, pool_bwd, relu_bwd = stage_backwards[i]
            d_pre = relu_bwd(d_cur)
            if i == config.stages - 1 and d_tap is not None:
                d_pre = d_pre + d_tap
            d_z = pool_bwd(d_pre)
            grads[f"stem.conv{i}.b"] = d_z.sum(axis=(1, 2))
            d_cur, grads[f"stem.conv{i}.w"] = conv_bwd(d_z)
        return d_cur, grads

    return features, tap, backward
