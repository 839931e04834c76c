"""Versioned binary checkpoints with byte-exact round trips.

Layout (all integers little-endian):

    magic            4 bytes  b"ANCP"
    version          u32      currently 1
    arch string      u32 length + UTF-8 (e.g. "wrn-28-4-adaptive")
    classes          u32
    input_channels   u32
    input_size       u32
    bn_eps           f64
    bn_momentum      f64
    norm channels    u32, then f64 mean per channel, f64 std per channel
    entry count      u32
    entries          u32 name length | UTF-8 name | u64 rank | u64 dims...
                     | raw float32 payload (row-major)

Entries appear in the model's deterministic registration order: trainable
parameters first, then batchnorm running statistics (``<bn>.running_mean`` /
``<bn>.running_var``), then optimizer velocities (``velocity.<param>``) when
saved.  Running statistics that were never initialized are stored at their
conventional start (mean 0, variance 1); loading always marks them
initialized.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from .errors import (
    ArchitectureMismatchError,
    CheckpointError,
    CheckpointMagicError,
    CheckpointVersionError,
)
from .models import ModelGraph, WrnSpec, build_wrn, parse_arch
from .tensor import Tensor

MAGIC = b"ANCP"
VERSION = 1


def _entries_of(model: ModelGraph, velocity: dict | None):
    for name, t in model.params.items():
        yield name, np.asarray(t.data, dtype=np.float32)
    for bn_name, state in model.bn_states().items():
        if state.initialized():
            mean, var = state.mean, state.var
        else:  # conventional start; saving must not mutate the live model
            mean = np.zeros(state.channels)
            var = np.ones(state.channels)
        yield f"{bn_name}.running_mean", mean.astype(np.float32)
        yield f"{bn_name}.running_var", var.astype(np.float32)
    if velocity is not None:
        for name in model.params:
            yield f"velocity.{name}", np.asarray(velocity[name].data, dtype=np.float32)


def save_checkpoint(model: ModelGraph, path: str, velocity: dict | None = None):
    """Serialize parameters, running statistics and (optionally) velocities."""
    spec = model.spec
    arch = spec.arch_string().encode("utf-8")
    entries = list(_entries_of(model, velocity))
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(arch)))
        f.write(arch)
        f.write(struct.pack("<III", spec.classes, spec.input_channels, spec.input_size))
        f.write(struct.pack("<dd", model.bn_eps, model.bn_momentum))
        f.write(struct.pack("<I", len(model.mean)))
        f.write(np.asarray(model.mean, dtype="<f8").tobytes())
        f.write(np.asarray(model.std, dtype="<f8").tobytes())
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<Q", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype("<f4", copy=False).tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def f64(self, what: str) -> float:
        return struct.unpack("<d", self.take(8, what))[0]


def _read_header(r: _Reader):
    if r.take(4, "magic") != MAGIC:
        raise CheckpointMagicError("bad checkpoint magic, expected 'ANCP'")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}, expected {VERSION}")
    arch = r.take(r.u32("arch length"), "arch string").decode("utf-8")
    classes = r.u32("classes")
    channels = r.u32("input channels")
    size = r.u32("input size")
    eps = r.f64("bn eps")
    momentum = r.f64("bn momentum")
    nchan = r.u32("normalization channel count")
    mean = np.frombuffer(r.take(8 * nchan, "normalization means"), dtype="<f8").copy()
    std = np.frombuffer(r.take(8 * nchan, "normalization stds"), dtype="<f8").copy()
    return arch, classes, channels, size, eps, momentum, mean, std


def _read_entries(r: _Reader) -> dict:
    count = r.u32("entry count")
    entries = {}
    for i in range(count):
        name = r.take(r.u32("entry name length"), "entry name").decode("utf-8")
        rank = r.u64("entry rank")
        if rank > 4:
            raise CheckpointError(f"entry '{name}' claims rank {rank} > 4")
        dims = tuple(r.u64(f"dim {d} of '{name}'") for d in range(rank))
        n = math.prod(dims)  # exact: u64 dims must not wrap
        payload = r.take(4 * n, f"payload of '{name}'")
        entries[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} trailing bytes after the last entry")
    return entries


def _apply_entries(model: ModelGraph, entries: dict) -> dict | None:
    for name, t in model.params.items():
        if name not in entries:
            raise CheckpointError(f"checkpoint is missing parameter '{name}'")
        arr = entries.pop(name)
        if arr.shape != t.shape:
            raise CheckpointError(
                f"parameter '{name}' has shape {arr.shape} in checkpoint, model expects {t.shape}")
        model.params[name] = Tensor(arr, requires_grad=True, name=name, dtype=model.dtype)
    for bn_name, state in model.bn_states().items():
        for suffix, attr in ((".running_mean", "mean"), (".running_var", "var")):
            key = bn_name + suffix
            if key not in entries:
                raise CheckpointError(f"checkpoint is missing running statistic '{key}'")
            arr = entries.pop(key)
            if arr.shape != (state.channels,):
                raise CheckpointError(
                    f"running statistic '{key}' has shape {arr.shape}, expected ({state.channels},)")
            setattr(state, attr, arr.astype(np.float64))
    velocity = None
    vel_entries = {k: v for k, v in entries.items() if k.startswith("velocity.")}
    if vel_entries:
        velocity = {}
        for name, t in model.params.items():
            key = f"velocity.{name}"
            if key not in vel_entries:
                raise CheckpointError(f"checkpoint is missing velocity entry '{key}'")
            arr = vel_entries.pop(key)
            if arr.shape != t.shape:
                raise CheckpointError(
                    f"velocity '{key}' has shape {arr.shape}, model expects {t.shape}")
            velocity[name] = Tensor(arr, dtype=model.dtype)
        for k in vel_entries:
            raise CheckpointError(f"unexpected checkpoint entry '{k}'")
    for k in entries:
        if not k.startswith("velocity."):
            raise CheckpointError(f"unexpected checkpoint entry '{k}'")
    return velocity


def load_checkpoint(path: str, dtype=np.float32):
    """Reconstruct the model (and optimizer velocities, if stored) from a file.

    Returns ``(model, velocity_or_None)``.
    """
    with open(path, "rb") as f:
        r = _Reader(f.read())
    arch, classes, channels, size, eps, momentum, mean, std = _read_header(r)
    spec = parse_arch(arch, classes, input_channels=channels, input_size=size)
    model = build_wrn(spec, mean=mean, std=std, dtype=dtype,
                      bn_momentum=momentum, bn_eps=eps)
    velocity = _apply_entries(model, _read_entries(r))
    return model, velocity


def load_checkpoint_into(model: ModelGraph, path: str):
    """Load a checkpoint into an existing model; architectures must match.

    Returns the stored optimizer velocities or None.
    """
    with open(path, "rb") as f:
        r = _Reader(f.read())
    arch, classes, channels, size, _, _, _, _ = _read_header(r)
    expected = model.spec.arch_string()
    stored_spec = (arch, classes, channels, size)
    model_spec = (expected, model.spec.classes, model.spec.input_channels, model.spec.input_size)
    if stored_spec != model_spec:
        actual = f"{arch} (classes={classes}, channels={channels}, size={size})"
        mine = (f"{expected} (classes={model.spec.classes}, "
                f"channels={model.spec.input_channels}, size={model.spec.input_size})")
        raise ArchitectureMismatchError(mine, actual)
    return _apply_entries(model, _read_entries(r))
