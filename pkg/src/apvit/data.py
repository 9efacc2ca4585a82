"""Synthetic byte-image corpus plus file I/O and training augmentation.

Four glyph classes (cross, ring, bars, checker) are drawn as dark strokes on
a textured mid-grey background: a one-pixel checkerboard ripple plus Gaussian
noise, so every background region carries energy.  Occluder rectangles are
pasted last as perfectly flat patches at the background's mean level; they
are the only textureless regions in an image, which is what makes them
mechanically droppable by magnitude-based patch criteria.  Every sample
records where its occluders sit, which is what selection-overlap analysis
consumes.

Datasets round-trip through a directory of PGM/PPM images plus a
``labels.csv`` of ``filename,label_index`` lines (occluder geometry is not
persisted; it only exists for freshly generated data).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GLYPH_NAMES = ("cross", "ring", "bars", "checker")


@dataclass(frozen=True)
class SyntheticSpec:
    side: int = 32
    channels: int = 1
    num_classes: int = 4
    train_count: int = 2400
    test_count: int = 800
    data_seed: int = 0
    background: int = 128
    texture: float = 32.0
    noise_sigma: float = 8.0
    glyph_value: int = 30
    occluder_count: int = 2
    occluder_min: int = 9
    occluder_max: int = 11
    occluder_value: int = 128

    def validate(self) -> None:
        if self.side < 16:
            raise ValueError(f"side must be >= 16, got {self.side}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if not 2 <= self.num_classes <= len(GLYPH_NAMES):
            raise ValueError(
                f"num_classes must be in [2, {len(GLYPH_NAMES)}], got {self.num_classes}"
            )
        if self.train_count < 1 or self.test_count < 1:
            raise ValueError("train_count and test_count must be positive")
        if not 0 <= self.occluder_count:
            raise ValueError(f"occluder_count must be >= 0, got {self.occluder_count}")
        if self.occluder_count and not 1 <= self.occluder_min <= self.occluder_max <= self.side:
            raise ValueError(
                f"occluder sides [{self.occluder_min}, {self.occluder_max}] do not fit side {self.side}"
            )
        if self.texture < 0 or self.noise_sigma < 0:
            raise ValueError("texture and noise_sigma must be >= 0")


@dataclass(frozen=True)
class Sample:
    """One image with its label and the (row0, col0, height, width) rectangles
    of any pasted occluders."""

    image: np.ndarray  # uint8 [C, S, S]
    label: int
    occluders: tuple = ()


@dataclass
class Dataset:
    samples: list

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i) -> Sample:
        return self.samples[i]

    @property
    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


# ---------------------------------------------------------------------------
# glyph drawing


def _draw_cross(canvas, rng, value):
    s = canvas.shape[0]
    cy = s // 2 + int(rng.integers(-3, 4))
    cx = s // 2 + int(rng.integers(-3, 4))
    half = int(rng.integers(8, 12))
    t = int(rng.integers(2, 4))
    canvas[max(cy - half, 0) : cy + half, cx : cx + t] = value
    canvas[cy : cy + t, max(cx - half, 0) : cx + half] = value


def _draw_ring(canvas, rng, value):
    s = canvas.shape[0]
    cy = s // 2 + int(rng.integers(-3, 4))
    cx = s // 2 + int(rng.integers(-3, 4))
    radius = float(rng.integers(7, 11))
    yy, xx = np.mgrid[0:s, 0:s]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    canvas[np.abs(dist - radius) < 1.4] = value


def _draw_bars(canvas, rng, value):
    s = canvas.shape[0]
    top = int(rng.integers(3, 8))
    gap = int(rng.integers(5, 8))
    t = int(rng.integers(2, 4))
    left = int(rng.integers(3, 7))
    right = s - int(rng.integers(3, 7))
    for b in range(3):
        r0 = top + b * gap
        canvas[r0 : r0 + t, left:right] = value


def _draw_checker(canvas, rng, value):
    s = canvas.shape[0]
    cell = int(rng.integers(3, 5))
    r0 = int(rng.integers(2, 6))
    c0 = int(rng.integers(2, 6))
    for i in range(4):
        for j in range(4):
            if (i + j) % 2 == 0:
                rr = r0 + i * 2 * cell
                cc = c0 + j * 2 * cell
                canvas[rr : rr + cell, cc : cc + cell] = value


_GLYPH_PAINTERS = (_draw_cross, _draw_ring, _draw_bars, _draw_checker)


def _render_sample(label: int, spec: SyntheticSpec, rng) -> Sample:
    s = spec.side
    canvas = np.full((s, s), float(spec.background))
    # deterministic 1px checkerboard: a fixed energy floor under every cell
    canvas += spec.texture * (np.indices((s, s)).sum(axis=0) % 2 * 2.0 - 1.0)
    canvas += rng.normal(0.0, spec.noise_sigma, size=(s, s))
    _GLYPH_PAINTERS[label](canvas, rng, float(spec.glyph_value))
    rects = []
    for _ in range(spec.occluder_count):
        h = int(rng.integers(spec.occluder_min, spec.occluder_max + 1))
        w = int(rng.integers(spec.occluder_min, spec.occluder_max + 1))
        r0 = int(rng.integers(0, s - h + 1))
        c0 = int(rng.integers(0, s - w + 1))
        canvas[r0 : r0 + h, c0 : c0 + w] = float(spec.occluder_value)  # flat: no texture
        rects.append((r0, c0, h, w))
    image = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    image = np.repeat(image[None], spec.channels, axis=0)
    return Sample(image=image, label=label, occluders=tuple(rects))


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Deterministic (train, test) pair.  The two splits draw from disjoint
    child streams of ``data_seed``, so changing one count never shifts the
    other split's pixels.  Labels cycle through the classes."""
    spec.validate()
    train_seq, test_seq = np.random.SeedSequence(spec.data_seed).spawn(2)
    out = []
    for seq, count in ((train_seq, spec.train_count), (test_seq, spec.test_count)):
        rng = np.random.default_rng(seq)
        samples = [_render_sample(i % spec.num_classes, spec, rng) for i in range(count)]
        out.append(Dataset(samples))
    return out[0], out[1]


def occluded_cells(occluders, side: int, reduction: int) -> set[int]:
    """Flat token-grid cell ids touched by any occluder rectangle."""
    grid = side // reduction
    cells = set()
    for r0, c0, h, w in occluders:
        for gr in range(r0 // reduction, (r0 + h - 1) // reduction + 1):
            for gc in range(c0 // reduction, (c0 + w - 1) // reduction + 1):
                if 0 <= gr < grid and 0 <= gc < grid:
                    cells.add(gr * grid + gc)
    return cells


# ---------------------------------------------------------------------------
# augmentation


def augment_batch(images: np.ndarray, rng) -> np.ndarray:
    """Horizontal flip with probability 1/2, then a random crop from a
    4-pixel reflect pad.  Input and output are [B, C, S, S] byte images."""
    b, _, s, _ = images.shape
    flips = rng.random(b) < 0.5
    offsets = rng.integers(0, 9, size=(b, 2))
    out = np.empty_like(images)
    for i in range(b):
        img = images[i, :, :, ::-1] if flips[i] else images[i]
        padded = np.pad(img, ((0, 0), (4, 4), (4, 4)), mode="reflect")
        r0, c0 = offsets[i]
        out[i] = padded[:, r0 : r0 + s, c0 : c0 + s]
    return out


# ---------------------------------------------------------------------------
# file formats


def write_image(path, image: np.ndarray) -> None:
    """PGM (P5) for single-channel images, PPM (P6) for three-channel."""
    path = Path(path)
    if image.dtype != np.uint8 or image.ndim != 3:
        raise ValueError(f"expected uint8 [C, H, W], got {image.dtype} {image.shape}")
    c, h, w = image.shape
    if c == 1:
        header = f"P5\n{w} {h}\n255\n".encode("ascii")
        payload = image[0].tobytes()
    elif c == 3:
        header = f"P6\n{w} {h}\n255\n".encode("ascii")
        payload = np.ascontiguousarray(image.transpose(1, 2, 0)).tobytes()
    else:
        raise ValueError(f"cannot encode {c}-channel image")
    path.write_bytes(header + payload)


def read_image(path) -> np.ndarray:
    """Inverse of ``write_image``; returns uint8 [C, H, W]."""
    blob = Path(path).read_bytes()
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    # header = magic, width, height, maxval as whitespace-separated tokens,
    # with optional '#' comment lines
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(int(blob[start:pos]))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = tokens
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * channels, offset=pos)
    if data.size != w * h * channels:
        raise ValueError(f"{path}: truncated pixel payload")
    if channels == 1:
        return data.reshape(1, h, w).copy()
    return np.ascontiguousarray(data.reshape(h, w, 3).transpose(2, 0, 1))


def save_dataset(directory, dataset: Dataset) -> None:
    """Write one image file per sample plus ``labels.csv`` rows of
    ``filename,label_index`` (LF line endings)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, sample in enumerate(dataset.samples):
        ext = "pgm" if sample.image.shape[0] == 1 else "ppm"
        name = f"{i:05d}.{ext}"
        write_image(directory / name, sample.image)
        rows.append((name, sample.label))
    with open(directory / "labels.csv", "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("filename", "label_index"))
        writer.writerows(rows)


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    index = directory / "labels.csv"
    if not index.exists():
        raise FileNotFoundError(f"{index} not found")
    samples = []
    with open(index, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["filename", "label_index"]:
            raise ValueError(f"{index}: unexpected header {header}")
        for name, label in reader:
            samples.append(Sample(image=read_image(directory / name), label=int(label)))
    return Dataset(samples)
