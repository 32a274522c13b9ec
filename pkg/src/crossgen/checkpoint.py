"""AICK checkpoint container.

Layout (little-endian)::

    magic      4s   b"AICK"
    version    u16  1
    arch       u16 length + utf-8 tag
    config     u32 length + JSON (sorted keys)
    epoch      u32  number of completed epochs
    meta       u32 length + JSON: optimizer step counts, rng state, extras
    n_tensors  u32
    tensors    n_tensors x (u16 name length, name, u8 ndim, ndim x u32 dims, f32 data)
    crc32      u32  over every preceding byte

Tensor names are ``<store>/<kind>/<name>`` with kind one of ``param``,
``adam_m``, ``adam_v`` or ``buffer``.
"""
from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .models import Network, build_model
from .pairfile import atomic_write_bytes

MAGIC = b"AICK"
VERSION = 1
_KINDS = ("param", "adam_m", "adam_v", "buffer")


class CheckpointError(ValueError):
    pass


@dataclass
class ModelCheckpoint:
    arch: str
    config: dict
    epoch: int
    tensors: "OrderedDict[str, np.ndarray]"
    step_counts: dict = field(default_factory=dict)
    rng_state: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    def restore_rng(self) -> np.random.Generator:
        if self.rng_state is None:
            raise CheckpointError("checkpoint carries no rng state")
        bitgen = getattr(np.random, self.rng_state["bit_generator"])()
        bitgen.state = self.rng_state
        return np.random.Generator(bitgen)


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def capture(model: Network, config: dict, epoch: int, rng: Optional[np.random.Generator] = None,
            extra: Optional[dict] = None) -> ModelCheckpoint:
    """Snapshot parameters, optimizer moments and buffers of ``model`` (copies)."""
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    steps = {}
    for store_name, store in model.stores().items():
        steps[store_name] = store.step_count
        for name, t in store.entries.items():
            tensors[f"{store_name}/param/{name}"] = t.data.astype(np.float32, copy=True)
            tensors[f"{store_name}/adam_m/{name}"] = store.adam_m[name].astype(np.float32, copy=True)
            tensors[f"{store_name}/adam_v/{name}"] = store.adam_v[name].astype(np.float32, copy=True)
        for name, buf in store.buffers.items():
            tensors[f"{store_name}/buffer/{name}"] = buf.astype(np.float32, copy=True)
    return ModelCheckpoint(
        arch=model.arch,
        config=dict(config),
        epoch=int(epoch),
        tensors=tensors,
        step_counts=steps,
        rng_state=None if rng is None else rng.bit_generator.state,
        extra=dict(extra or {}),
    )


def restore(model: Network, ckpt: ModelCheckpoint) -> Network:
    """Copy every tensor of ``ckpt`` into ``model``; shapes and names must match exactly."""
    if ckpt.arch != model.arch:
        raise CheckpointError(f"architecture mismatch: checkpoint is {ckpt.arch!r}, model is {model.arch!r}")
    stores = model.stores()
    expected = set()
    for store_name, store in stores.items():
        for name in store.entries:
            expected.update(f"{store_name}/{k}/{name}" for k in _KINDS[:3])
        expected.update(f"{store_name}/buffer/{name}" for name in store.buffers)
    if set(ckpt.tensors) != expected:
        missing = sorted(expected - set(ckpt.tensors))[:3]
        unknown = sorted(set(ckpt.tensors) - expected)[:3]
        raise CheckpointError(f"tensor set mismatch (missing {missing}, unexpected {unknown})")
    targets = []
    for key, value in ckpt.tensors.items():
        store_name, kind, name = key.split("/", 2)
        store = stores[store_name]
        target = {
            "param": lambda: store.entries[name].data,
            "adam_m": lambda: store.adam_m[name],
            "adam_v": lambda: store.adam_v[name],
            "buffer": lambda: store.buffers[name],
        }[kind]()
        if target.shape != value.shape:
            raise CheckpointError(f"{key}: shape {value.shape} does not match model shape {target.shape}")
        targets.append((target, value))
    # every shape is checked before the first write, so a bad file never leaves a half-loaded model
    for target, value in targets:
        target[...] = value
    for store_name, store in stores.items():
        store.step_count = int(ckpt.step_counts.get(store_name, 0))
        store.zero_grad()
    return model


def to_model(ckpt: ModelCheckpoint) -> Network:
    model = build_model(ckpt.arch, latent_dim=int(ckpt.config.get("latent_dim", 64)))
    return restore(model, ckpt)


def encode_checkpoint(ckpt: ModelCheckpoint) -> bytes:
    out = bytearray()
    arch = ckpt.arch.encode("utf-8")
    config = _json(ckpt.config)
    meta = _json({"step_counts": ckpt.step_counts, "rng_state": ckpt.rng_state, "extra": ckpt.extra})
    out += struct.pack("<4sHH", MAGIC, VERSION, len(arch)) + arch
    out += struct.pack("<I", len(config)) + config
    out += struct.pack("<I", ckpt.epoch)
    out += struct.pack("<I", len(meta)) + meta
    out += struct.pack("<I", len(ckpt.tensors))
    for name, value in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError("AICK file truncated")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("AICK file truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk


def decode_checkpoint(data: bytes, expected_arch: Optional[str] = None) -> ModelCheckpoint:
    if len(data) < 12:
        raise CheckpointError("AICK file truncated")
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    (stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != stored:
        raise CheckpointError("checksum mismatch")
    r = _Reader(data[:-4])
    _, version, arch_len = r.take("<4sHH")
    if version != VERSION:
        raise CheckpointError(f"unsupported AICK version {version}")
    arch = r.raw(arch_len).decode("utf-8")
    if expected_arch is not None and arch != expected_arch:
        raise CheckpointError(f"architecture mismatch: expected {expected_arch!r}, file holds {arch!r}")
    config = json.loads(r.raw(r.take("<I")[0]))
    (epoch,) = r.take("<I")
    meta = json.loads(r.raw(r.take("<I")[0]))
    (n,) = r.take("<I")
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(n):
        name = r.raw(r.take("<H")[0]).decode("utf-8")
        (ndim,) = r.take("<B")
        shape = r.take(f"<{ndim}I")
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.raw(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after tensor table")
    return ModelCheckpoint(arch, config, epoch, tensors, meta["step_counts"], meta["rng_state"], meta["extra"])


def save_checkpoint(path, ckpt: ModelCheckpoint) -> None:
    """Write atomically: readers never observe a partially written file."""
    atomic_write_bytes(path, encode_checkpoint(ckpt))


def load_checkpoint(path, expected_arch: Optional[str] = None) -> ModelCheckpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), expected_arch)
