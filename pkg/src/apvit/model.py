"""Model assembly: configuration, parameter initialization in a fixed
canonical order, the end-to-end forward pass, argmax prediction, and the
binary checkpoint format.

Parameters live in a plain dict keyed by canonical names; the key order of
``param_shapes`` defines both the initialization draw order and the
checkpoint layout, so a seed pins every byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .encoder import AtpVariant, keep_schedule
from .pooling import CriterionKind, lanet_param_shapes
from .stem import StemConfig

CHECKPOINT_MAGIC = b"APVT"
CHECKPOINT_VERSION = 1


class PoolingMode(Enum):
    HARD = "hard"
    SOFT = "soft"
    NONE = "none"


class HeadKind(Enum):
    CLT = "clt"
    GAP = "gap"


@dataclass(frozen=True)
class ApvitConfig:
    stem: StemConfig = field(default_factory=StemConfig)
    embed_dim: int = 64
    blocks: int = 8
    heads: int = 4
    k: int = 48
    r: float = 0.8
    criterion: CriterionKind = CriterionKind.ABS
    atp_variant: AtpVariant = AtpVariant.SUM
    pooling_mode: PoolingMode = PoolingMode.HARD
    head: HeadKind = HeadKind.CLT
    num_classes: int = 4
    lanet_ratio: int = 8
    linear_tap: bool = True
    ln_eps: float = 1e-5

    def validate(self) -> None:
        self.stem.validate()
        if self.embed_dim < 1 or self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} must be a positive multiple of heads {self.heads}"
            )
        if self.blocks < 2 or self.blocks % 2 != 0:
            raise ValueError(f"blocks must be even and >= 2, got {self.blocks}")
        if not 1 <= self.k <= self.stem.patch_count:
            raise ValueError(
                f"k={self.k} out of range for {self.stem.patch_count} stem cells"
            )
        if not 0.0 < self.r <= 1.0:
            raise ValueError(f"r must be in (0, 1], got {self.r}")
        if self.num_classes < 2:
            raise ValueError(f"need >= 2 classes, got {self.num_classes}")
        if self.criterion is CriterionKind.LANET:
            lanet_param_shapes(self.stem.out_channels, self.lanet_ratio)
        # both pooled and unpooled schedules must stay above zero tokens
        keep_schedule(self.initial_patch_count, self.r, self.blocks)

    @property
    def initial_patch_count(self) -> int:
        """Patch tokens entering the encoder: k under hard pooling, the full
        grid otherwise."""
        if self.pooling_mode is PoolingMode.HARD:
            return self.k
        return self.stem.patch_count


@dataclass
class Diagnostics:
    """Per-sample forward trace for visualization and selection analysis."""

    criterion: np.ndarray  # [H, W] scores from the configured criterion
    app_indices: np.ndarray  # flat stem-cell ids entering the encoder
    trail: list  # kept patch ids after each block
    logits: np.ndarray


def param_shapes(config: ApvitConfig) -> dict[str, tuple]:
    """Canonical name -> shape map.  Iteration order is the checkpoint and
    initialization order."""
    config.validate()
    s = config.stem
    d = config.embed_dim
    shapes: dict[str, tuple] = {}
    prev = s.input_channels
    for i, ch in enumerate(s.channels):
        shapes[f"stem.conv{i}.w"] = (ch, prev, 3, 3)
        shapes[f"stem.conv{i}.b"] = (ch,)
        prev = ch
    if config.criterion is CriterionKind.LANET:
        shapes.update(lanet_param_shapes(s.out_channels, config.lanet_ratio))
    shapes["embed.w"] = (s.out_channels, d)
    shapes["embed.b"] = (d,)
    shapes["cls_token"] = (d,)
    shapes["pos_table"] = (s.patch_count + 1, d)
    for i in range(config.blocks):
        p = f"block{i}"
        shapes[f"{p}.ln1.g"] = (d,)
        shapes[f"{p}.ln1.b"] = (d,)
        shapes[f"{p}.attn.wq"] = (d, d)
        shapes[f"{p}.attn.wk"] = (d, d)
        shapes[f"{p}.attn.wv"] = (d, d)
        shapes[f"{p}.attn.wo"] = (d, d)
        shapes[f"{p}.ln2.g"] = (d,)
        shapes[f"{p}.ln2.b"] = (d,)
        shapes[f"{p}.mlp.w1"] = (d, 4 * d)
        shapes[f"{p}.mlp.b1"] = (4 * d,)
        shapes[f"{p}.mlp.w2"] = (4 * d, d)
        shapes[f"{p}.mlp.b2"] = (d,)
    shapes["final_ln.g"] = (d,)
    shapes["final_ln.b"] = (d,)
    shapes["head.w"] = (d, config.num_classes)
    shapes["head.b"] = (config.num_classes,)
    return shapes


def _fan_bound(shape: tuple) -> float:
    """Uniform init half-width sqrt(6 / (fan_in + fan_out))."""
    if len(shape) == 2:
        fan_in, fan_out = shape
    elif len(shape) == 4:
        c_out, c_in, kh, kw = shape
        fan_in, fan_out = c_in * kh * kw, c_out * kh * kw
    else:
        raise ValueError(f"no fan rule for shape {shape}")
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def is_weight(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in ("w", "w1", "w2", "wq", "wk", "wv", "wo")


def is_decay_exempt(name: str) -> bool:
    """LayerNorm gains/shifts and the class token skip weight decay."""
    return ".ln1." in name or ".ln2." in name or name.startswith("final_ln.") or name == "cls_token"


def init_params(config: ApvitConfig, seed: int) -> dict[str, np.ndarray]:
    """Deterministic initialization: fan-bounded uniform for every weight
    matrix/kernel, ones for LayerNorm gains, zeros for everything else."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if is_weight(name):
            bound = _fan_bound(shape)
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".g"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def forward(image: np.ndarray, params: dict, config: ApvitConfig):
    """Classify one [Cin, S, S] byte image.  Returns (logits, Diagnostics)."""
    from . import engine

    logits, _, aux = engine.forward_batch(image[None], params, config)
    return logits[0], Diagnostics(
        criterion=aux.criterion[0],
        app_indices=aux.app_indices[0],
        trail=[ids[0] for ids in aux.trail],
        logits=logits[0],
    )


def predict_label(logits: np.ndarray) -> int:
    """Argmax with ties resolved to the smaller class index."""
    return int(np.argmax(logits))


def save_checkpoint(path, params: dict) -> None:
    """Little-endian binary layout: magic 'APVT', u32 format version, then per
    tensor (u32 name length, name bytes, u32 rank, u32 dims..., float64
    payload), finished by a u64 holding the byte length of everything before
    it (truncation check)."""
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<I", CHECKPOINT_VERSION)
    for name, tensor in params.items():
        raw = name.encode("utf-8")
        body += struct.pack("<I", len(raw))
        body += raw
        body += struct.pack("<I", tensor.ndim)
        body += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
        body += np.ascontiguousarray(tensor, dtype="<f8").tobytes()
    body += struct.pack("<Q", len(body))
    with open(path, "wb") as fh:
        fh.write(body)


def load_checkpoint(path, config: ApvitConfig | None = None) -> dict[str, np.ndarray]:
    """Read a checkpoint back.  Verifies magic, version, and the length
    trailer; with a config, also that names, order, and shapes match it."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (trailer,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    if trailer != len(blob) - 8:
        raise ValueError(f"{path}: truncated or corrupt (length trailer mismatch)")
    params: dict[str, np.ndarray] = {}
    off = 8
    end = len(blob) - 8
    while off < end:
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        tensor = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        params[name] = tensor.astype(np.float64)
    if off != end:
        raise ValueError(f"{path}: trailing garbage after last tensor")
    if config is not None:
        expected = param_shapes(config)
        got = {n: t.shape for n, t in params.items()}
        want = {n: tuple(s) for n, s in expected.items()}
        if got != want:
            missing = sorted(set(want) - set(got))
            extra = sorted(set(got) - set(want))
            wrong = sorted(n for n in set(got) & set(want) if got[n] != want[n])
            raise ValueError(
                f"{path}: checkpoint does not fit config "
                f"(missing={missing}, unexpected={extra}, shape mismatches={wrong})"
            )
        if list(params) != list(expected):
            raise ValueError(f"{path}: tensor order differs from canonical order")
    return params


def with_pooling(config: ApvitConfig, k: int | None = None, r: float | None = None,
                 pooling_mode: PoolingMode | None = None) -> ApvitConfig:
    """Convenience copy-with-overrides used by schedules and ablations."""
    kwargs = {}
    if k is not None:
        kwargs["k"] = k
    if r is not None:
        kwargs["r"] = r
    if pooling_mode is not None:
        kwargs["pooling_mode"] = pooling_mode
    return replace(config, **kwargs)
