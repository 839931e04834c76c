"""Dataset ingestion: IDX digit files, CIFAR binary batches, synthetic tasks.

Images are always float32 N x C x H x W scaled to [0, 1]; labels are int64.
Per-channel normalization constants ride along with the dataset and are baked
into the model's fixed first layer, so attack budgets remain in raw pixel
space.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError
from .rng import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Channel means/stds conventionally used for the CIFAR datasets.
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR100_MEAN = (0.5071, 0.4865, 0.4409)
CIFAR100_STD = (0.2673, 0.2564, 0.2762)


@dataclass
class Dataset:
    """A labelled image collection plus its normalization constants."""

    images: np.ndarray            # N x C x H x W float32 in [0, 1]
    labels: np.ndarray            # N int64 in [0, classes)
    classes: int
    split: str = "train"
    mean: tuple = ()
    std: tuple = ()

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConfigError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0] or self.images.shape[0] == 0:
            raise ConfigError("images and labels must be non-empty and aligned")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ConfigError("pixels must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ConfigError(f"labels out of range [0, {self.classes})")
        c = self.images.shape[1]
        if not self.mean:
            self.mean = (0.0,) * c
        if not self.std:
            self.std = (1.0,) * c

    @property
    def n(self) -> int:
        return int(self.images.shape[0])

    @property
    def channels(self) -> int:
        return int(self.images.shape[1])

    @property
    def image_size(self) -> int:
        return int(self.images.shape[2])


# ---------------------------------------------------------------------------
# IDX format
# ---------------------------------------------------------------------------

def _read_exact(buf: bytes, offset: int, count: int, what: str) -> bytes:
    if offset + count > len(buf):
        raise ParseError(
            f"truncated IDX file while reading {what}: expected {count} bytes, "
            f"have {len(buf) - offset}", offset=offset)
    return buf[offset : offset + count]


def load_idx(images_path: str, labels_path: str, split: str = "train") -> Dataset:
    """Load an IDX image/label file pair (big-endian headers, u8 pixels)."""
    with open(images_path, "rb") as f:
        ibuf = f.read()
    with open(labels_path, "rb") as f:
        lbuf = f.read()

    (magic,) = struct.unpack(">I", _read_exact(ibuf, 0, 4, "image magic"))
    if magic != IDX_IMAGES_MAGIC:
        raise ParseError(f"bad IDX image magic 0x{magic:08X}, expected 0x{IDX_IMAGES_MAGIC:08X}", offset=0)
    n, h, w = struct.unpack(">III", _read_exact(ibuf, 4, 12, "image dimensions"))
    if n == 0 or h == 0 or w == 0:
        raise ParseError(f"degenerate IDX image dimensions {n}x{h}x{w}", offset=4)
    expected = 16 + n * h * w
    if len(ibuf) != expected:
        raise ParseError(
            f"IDX image payload size mismatch: expected {expected} bytes total, got {len(ibuf)}",
            offset=min(expected, len(ibuf)))
    pixels = np.frombuffer(ibuf, dtype=np.uint8, offset=16).reshape(n, 1, h, w)

    (lmagic,) = struct.unpack(">I", _read_exact(lbuf, 0, 4, "label magic"))
    if lmagic != IDX_LABELS_MAGIC:
        raise ParseError(f"bad IDX label magic 0x{lmagic:08X}, expected 0x{IDX_LABELS_MAGIC:08X}", offset=0)
    (ln,) = struct.unpack(">I", _read_exact(lbuf, 4, 4, "label count"))
    if ln != n:
        raise ParseError(f"IDX label count {ln} does not match image count {n}", offset=4)
    if len(lbuf) != 8 + ln:
        raise ParseError(
            f"IDX label payload size mismatch: expected {8 + ln} bytes total, got {len(lbuf)}",
            offset=min(8 + ln, len(lbuf)))
    labels = np.frombuffer(lbuf, dtype=np.uint8, offset=8).astype(np.int64)

    classes = int(labels.max()) + 1 if labels.size else 1
    if classes < 2:
        classes = 2
    return Dataset(pixels.astype(np.float32) / 255.0, labels, classes, split=split)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: str, labels_path: str):
    """Write a dataset's images/labels as an IDX pair (inverse of load_idx)."""
    images = np.asarray(images)
    if images.ndim == 4:
        if images.shape[1] != 1:
            raise ConfigError("IDX stores single-channel images only")
        images = images[:, 0]
    n, h, w = images.shape
    if images.dtype != np.uint8:
        images = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(images.tobytes())
    labels = np.asarray(labels).astype(np.uint8)
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(labels.tobytes())


# ---------------------------------------------------------------------------
# CIFAR binary format
# ---------------------------------------------------------------------------

def load_cifar_binary(paths, variant: str = "cifar10", split: str = "train") -> Dataset:
    """Load CIFAR binary batch files.

    Each record is 1 label byte (cifar10) or coarse+fine label bytes
    (cifar100) followed by 3072 pixel bytes in channel-planar R, G, B order.
    """
    if isinstance(paths, str):
        paths = [paths]
    if variant == "cifar10":
        label_bytes, classes, mean, std = 1, 10, CIFAR10_MEAN, CIFAR10_STD
    elif variant == "cifar100":
        label_bytes, classes, mean, std = 2, 100, CIFAR100_MEAN, CIFAR100_STD
    else:
        raise ConfigError(f"unknown CIFAR variant '{variant}'")
    record = label_bytes + 3072

    all_images = []
    all_labels = []
    for path in paths:
        with open(path, "rb") as f:
            buf = f.read()
        if len(buf) == 0 or len(buf) % record != 0:
            raise ParseError(
                f"{path}: size {len(buf)} is not a positive multiple of the {record}-byte record",
                offset=len(buf) - (len(buf) % record))
        raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, record)
        labels = raw[:, label_bytes - 1].astype(np.int64)  # fine label for cifar100
        if labels.max(initial=0) >= classes:
            bad = int(np.argmax(labels >= classes))
            raise ParseError(f"{path}: record {bad} has label {labels[bad]} >= {classes}",
                             offset=bad * record)
        images = raw[:, label_bytes:].reshape(-1, 3, 32, 32)
        all_images.append(images)
        all_labels.append(labels)

    images = np.concatenate(all_images).astype(np.float32) / 255.0
    labels = np.concatenate(all_labels)
    return Dataset(images, labels, classes, split=split, mean=mean, std=std)


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------

def synth_dataset(pattern: str, n: int, classes: int = 4, noise: float = 0.1,
                  seed: int = 0, image_size: int = 16, split: str = "train") -> Dataset:
    """Deterministic class-conditional single-channel images.

    ``blobs`` renders one Gaussian bump per class at a class-specific
    position on a circle; ``rings`` renders one annulus per class with a
    class-specific radius.  ``noise`` jitters the pattern geometry and adds
    pixel noise; at noise 0 every sample of a class is identical.
    """
    if pattern not in ("blobs", "rings"):
        raise ConfigError(f"unknown synthetic pattern '{pattern}'")
    if n < 2 * classes:
        raise ConfigError(f"need n >= 2*classes, got n={n} for {classes} classes")
    rng = Rng(seed).derive("synth", pattern)
    s = image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    center = (s - 1) / 2.0

    images = np.empty((n, 1, s, s), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        c = i % classes  # round-robin keeps any prefix near-balanced
        labels[i] = c
        jx = rng.normal(()) * noise * s * 0.15
        jy = rng.normal(()) * noise * s * 0.15
        if pattern == "blobs":
            ang = 2.0 * np.pi * c / classes
            cx = center + 0.30 * s * np.cos(ang) + jx
            cy = center + 0.30 * s * np.sin(ang) + jy
            r2 = (xx - cx) ** 2 + (yy - cy) ** 2
            img = np.exp(-r2 / (2.0 * (s / 8.0) ** 2))
        else:
            radius = (0.15 + 0.30 * c / max(1, classes - 1)) * s + jx
            dist = np.sqrt((xx - center) ** 2 + (yy - center) ** 2)
            img = np.exp(-((dist - radius) ** 2) / (2.0 * (s / 12.0) ** 2))
        img = img + noise * 0.1 * rng.normal((s, s))
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, classes, split=split)


# ---------------------------------------------------------------------------
# dataset spec strings (CLI surface)
# ---------------------------------------------------------------------------

def parse_dataset_spec(text: str, split: str = "validation") -> Dataset:
    """Load a dataset from a compact spec string.

    Forms:
      ``synth:blobs,n=256,classes=4,noise=0.1,size=16,seed=0``
      ``idx:images=PATH,labels=PATH``
      ``cifar10:PATH[;PATH...]`` / ``cifar100:PATH``
    """
    kind, _, rest = text.strip().partition(":")
    kind = kind.strip()
    if kind == "synth":
        parts = rest.split(",") if rest else []
        if not parts or "=" in parts[0]:
            raise ConfigError(f"synth spec must start with a pattern name: '{text}'")
        pattern = parts[0].strip()
        kwargs = {"n": 256, "classes": 4, "noise": 0.1, "seed": 0, "image_size": 16}
        keymap = {"n": "n", "classes": "classes", "noise": "noise", "seed": "seed", "size": "image_size"}
        for item in parts[1:]:
            key, sep, value = item.partition("=")
            key = key.strip()
            if not sep or key not in keymap:
                raise ConfigError(f"bad synth dataset option '{item}' in '{text}'")
            try:
                kwargs[keymap[key]] = float(value) if key == "noise" else int(value)
            except ValueError as exc:
                raise ConfigError(f"bad value in synth dataset option '{item}'") from exc
        return synth_dataset(pattern, split=split, **kwargs)
    if kind == "idx":
        opts = dict(item.partition("=")[::2] for item in rest.split(","))
        if set(opts) != {"images", "labels"}:
            raise ConfigError(f"idx spec needs images=PATH,labels=PATH, got '{text}'")
        return load_idx(opts["images"].strip(), opts["labels"].strip(), split=split)
    if kind in ("cifar10", "cifar100"):
        paths = [p.strip() for p in rest.split(";") if p.strip()]
        if not paths:
            raise ConfigError(f"{kind} spec needs at least one file path")
        return load_cifar_binary(paths, variant=kind, split=split)
    raise ConfigError(f"unknown dataset kind '{kind}' in '{text}'")
