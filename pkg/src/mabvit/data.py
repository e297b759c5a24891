"""Synthetic image classification data and its binary container format.

File layout (little-endian throughout):

    8 bytes  magic "MABDATA1"
    u64      sample count
    u32      height
    u32      width
    u32      channels
    u32      num_classes
    u8       pixel format: 0 = uint8, 1 = float32
    then count*h*w*c pixels in the declared format, row-major, channels fastest
    then count labels as u32

The generator plants one fixed random motif per class (drawn once from the
motif seed) at a random position in each sample, over Gaussian background
noise.  The class is therefore recoverable only by recognizing the motif
wherever it lands — position varies per sample — which a patch model must do
by combining patches, not by reading any fixed pixel.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"MABDATA1"
PIXEL_UINT8 = 0
PIXEL_FLOAT32 = 1

_HEADER = struct.Struct("<Q4IB")  # after the 8-byte magic
HEADER_SIZE = len(MAGIC) + _HEADER.size


@dataclass
class SyntheticSpec:
    classes: int
    per_class: int
    image_size: int
    motif_size: int = 12
    noise_sigma: float = 0.25
    channels: int = 3

    def __post_init__(self):
        for name in ("classes", "per_class", "image_size", "motif_size", "channels"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
                raise ConfigError(f"{name} must be a positive int, got {v!r}")
        if self.motif_size > self.image_size:
            raise ConfigError(
                f"motif_size {self.motif_size} exceeds image_size {self.image_size}"
            )
        if not (self.noise_sigma >= 0.0 and np.isfinite(self.noise_sigma)):
            raise ConfigError(f"noise_sigma must be finite and >= 0, got {self.noise_sigma}")


# Desk-scale default: trains to high accuracy in minutes on one CPU.
DEFAULT_SPEC = SyntheticSpec(classes=10, per_class=500, image_size=32)


@dataclass
class Dataset:
    images: np.ndarray  # float64, (N, H, W, C); uint8 files arrive scaled to [0, 1]
    labels: np.ndarray  # int64, (N,)
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)


# -- writing ----------------------------------------------------------------------


def save_dataset(
    path: str | Path,
    images: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    pixel_format: int = PIXEL_FLOAT32,
) -> None:
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim != 4:
        raise ConfigError(f"images must be (N, H, W, C), got shape {images.shape}")
    if labels.shape != (images.shape[0],):
        raise ConfigError(
            f"labels shape {labels.shape} does not match {images.shape[0]} images"
        )
    if pixel_format not in (PIXEL_UINT8, PIXEL_FLOAT32):
        raise ConfigError(f"unknown pixel format {pixel_format}")
    n, h, w, c = images.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_HEADER.pack(n, h, w, c, num_classes, pixel_format))
        if pixel_format == PIXEL_UINT8:
            f.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())
        else:
            f.write(np.ascontiguousarray(images, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(labels, dtype="<u4").tobytes())


def class_motifs(spec: SyntheticSpec, motif_seed: int) -> np.ndarray:
    """One fixed (motif, motif, C) pattern per class, independent of sample count."""
    m = spec.motif_size
    return np.stack(
        [
            np.random.default_rng([motif_seed, c]).standard_normal((m, m, spec.channels))
            for c in range(spec.classes)
        ]
    )


def gen_synthetic(
    spec: SyntheticSpec,
    seed: int,
    path: str | Path,
    *,
    motif_seed: int | None = None,
    pixel_format: int = PIXEL_FLOAT32,
) -> None:
    """Write one dataset file: per-class motif at a random position plus noise.

    `motif_seed` (default: `seed`) pins the class motifs separately from the
    sample stream, so a train file and a val file generated with different
    `seed` but the same `motif_seed` share classes while sharing no samples.
    """
    if motif_seed is None:
        motif_seed = seed
    motifs = class_motifs(spec, motif_seed)
    rng = np.random.default_rng(seed)
    s, m = spec.image_size, spec.motif_size
    n = spec.classes * spec.per_class
    images = np.empty((n, s, s, spec.channels), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for c in range(spec.classes):
        for _ in range(spec.per_class):
            img = spec.noise_sigma * rng.standard_normal((s, s, spec.channels))
            y, x = rng.integers(0, s - m + 1, size=2)
            img[y : y + m, x : x + m] += motifs[c]
            images[i] = img
            labels[i] = c
            i += 1
    if pixel_format == PIXEL_UINT8:
        # Affine squash into byte range; clipping loses the tails, which is
        # acceptable for this secondary storage path.
        images = np.clip(images * 64.0 + 128.0, 0, 255).astype(np.uint8)
    else:
        images = images.astype(np.float32)
    save_dataset(path, images, labels, spec.classes, pixel_format)


# -- reading ----------------------------------------------------------------------


def load_dataset(path: str | Path) -> Dataset:
    """Read and fully validate one dataset file.

    uint8 pixels are scaled to [0, 1]; float32 pixels are returned exactly as
    stored (standardization is a separate, explicit step — see `standardize`).
    """
    blob = Path(path).read_bytes()
    if len(blob) < HEADER_SIZE:
        raise FormatError(
            f"{path}: truncated header, {len(blob)} bytes < {HEADER_SIZE}"
        )
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(
            f"{path}: bad magic {blob[:len(MAGIC)]!r} at byte 0 (expected {MAGIC!r})"
        )
    count, h, w, c, num_classes, pixfmt = _HEADER.unpack_from(blob, len(MAGIC))
    if count == 0 or h == 0 or w == 0 or c == 0 or num_classes == 0:
        raise FormatError(
            f"{path}: header at byte {len(MAGIC)} declares empty dims "
            f"(count={count}, h={h}, w={w}, c={c}, classes={num_classes})"
        )
    if pixfmt not in (PIXEL_UINT8, PIXEL_FLOAT32):
        raise FormatError(f"{path}: unknown pixel format {pixfmt} at byte {HEADER_SIZE - 1}")
    elem = 1 if pixfmt == PIXEL_UINT8 else 4
    pixels = count * h * w * c
    img_bytes = pixels * elem
    label_off = HEADER_SIZE + img_bytes
    expected = label_off + 4 * count
    if len(blob) != expected:
        raise FormatError(
            f"{path}: file is {len(blob)} bytes but the header declares {expected} "
            f"(mismatch from byte {min(len(blob), expected)})"
        )
    if pixfmt == PIXEL_UINT8:
        raw = np.frombuffer(blob, dtype=np.uint8, count=pixels, offset=HEADER_SIZE)
        images = raw.astype(np.float64).reshape(count, h, w, c) / 255.0
    else:
        raw = np.frombuffer(blob, dtype="<f4", count=pixels, offset=HEADER_SIZE)
        if not np.isfinite(raw).all():
            bad = int(np.flatnonzero(~np.isfinite(raw))[0])
            raise FormatError(
                f"{path}: non-finite pixel at element {bad} "
                f"(byte {HEADER_SIZE + 4 * bad})"
            )
        images = raw.astype(np.float64).reshape(count, h, w, c)
    labels32 = np.frombuffer(blob, dtype="<u4", count=count, offset=label_off)
    if (labels32 >= num_classes).any():
        bad = int(np.flatnonzero(labels32 >= num_classes)[0])
        raise FormatError(
            f"{path}: label {int(labels32[bad])} at byte {label_off + 4 * bad} "
            f"is out of range for {num_classes} classes"
        )
    return Dataset(images=images, labels=labels32.astype(np.int64), num_classes=num_classes)


# -- standardization --------------------------------------------------------------


@dataclass
class ChannelStats:
    mean: np.ndarray  # (C,)
    std: np.ndarray  # (C,), floored away from zero


def channel_stats(images: np.ndarray) -> ChannelStats:
    """Per-channel mean/std over every pixel of every image."""
    flat = images.reshape(-1, images.shape[-1])
    return ChannelStats(
        mean=flat.mean(axis=0),
        std=np.maximum(flat.std(axis=0), 1e-8),
    )


def standardize(images: np.ndarray, stats: ChannelStats) -> np.ndarray:
    return (images - stats.mean) / stats.std


def save_stats(path: str | Path, stats: ChannelStats) -> None:
    with open(path, "w") as f:
        f.write("mean=" + ",".join(repr(float(v)) for v in stats.mean) + "\n")
        f.write("std=" + ",".join(repr(float(v)) for v in stats.std) + "\n")


def load_stats(path: str | Path) -> ChannelStats:
    fields: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or key not in ("mean", "std") or key in fields:
            raise FormatError(f"{path}: line {lineno}: expected unique mean=/std= lines")
        try:
            fields[key] = np.array([float(v) for v in value.split(",")])
        except ValueError:
            raise FormatError(f"{path}: line {lineno}: unparseable floats") from None
    if set(fields) != {"mean", "std"} or fields["mean"].shape != fields["std"].shape:
        raise FormatError(f"{path}: stats file must hold matching mean= and std= lines")
    return ChannelStats(mean=fields["mean"], std=fields["std"])


# -- batching ---------------------------------------------------------------------


def make_batches(dataset: Dataset, batch_size: int, seed: int, shuffle: bool = True):
    """Yield (images, labels) covering every sample exactly once, in seeded order.

    The last batch may be short.  Same (seed, batch_size) means the same order
    on every run.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if shuffle:
        order = np.random.default_rng(seed).permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


# -- on-disk layout for a generated corpus ----------------------------------------

TRAIN_FILE = "train.bin"
VAL_FILE = "val.bin"
STATS_FILE = "norm.txt"


def gen_corpus(
    spec: SyntheticSpec,
    seed: int,
    out_dir: str | Path,
    *,
    val_per_class: int | None = None,
) -> None:
    """Write train.bin, val.bin, and norm.txt (train-split channel stats).

    Train and val share motifs (same motif seed) but draw disjoint sample
    streams.  By default the val split holds per_class // 5 samples per class.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if val_per_class is None:
        val_per_class = max(1, spec.per_class // 5)
    val_spec = SyntheticSpec(
        classes=spec.classes,
        per_class=val_per_class,
        image_size=spec.image_size,
        motif_size=spec.motif_size,
        noise_sigma=spec.noise_sigma,
        channels=spec.channels,
    )
    gen_synthetic(spec, seed, out / TRAIN_FILE, motif_seed=seed)
    gen_synthetic(val_spec, seed + 1, out / VAL_FILE, motif_seed=seed)
    train = load_dataset(out / TRAIN_FILE)
    save_stats(out / STATS_FILE, channel_stats(train.images))
