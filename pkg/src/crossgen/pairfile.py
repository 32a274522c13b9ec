"""AIPX binary container for aligned pair sets.

Layout (little-endian)::

    magic      4s   b"AIPX"
    version    u16  1
    mapping    u8   0 = many_to_one, 1 = one_to_one
    split      u8   0 = train, 1 = test
    seed       u64
    n_pairs    u32
    n_sources  u32
    sources    n_sources x (u16 length, utf-8 bytes)   audio provenance ids
    pairs      n_pairs x record
               label u8 | source u32 | image_id u32 | image 784 x u8 | spectrogram 2304 x f32
    crc32      u32  over every preceding byte
"""
from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .dataset import MANY_TO_ONE, ONE_TO_ONE, PairSet

MAGIC = b"AIPX"
VERSION = 1
_HEADER = struct.Struct("<4sHBBQII")
_KINDS = (MANY_TO_ONE, ONE_TO_ONE)
_SPLITS = ("train", "test")

RECORD = np.dtype([
    ("label", "u1"),
    ("source", "<u4"),
    ("image_id", "<u4"),
    ("image", "u1", (784,)),
    ("spec", "<f4", (2304,)),
])


class PairFileError(ValueError):
    pass


def encode_pairset(ps: PairSet) -> bytes:
    head = _HEADER.pack(MAGIC, VERSION, _KINDS.index(ps.mapping_kind), _SPLITS.index(ps.split),
                        int(ps.seed), len(ps), len(ps.source_ids))
    table = bytearray()
    for sid in ps.source_ids:
        raw = sid.encode("utf-8")
        table += struct.pack("<H", len(raw)) + raw
    rec = np.empty(len(ps), dtype=RECORD)
    rec["label"] = ps.labels
    rec["source"] = ps.audio_index
    rec["image_id"] = ps.image_ids
    rec["image"] = ps.images.reshape(len(ps), -1)
    rec["spec"] = ps.spectrograms[ps.audio_index].reshape(len(ps), -1)
    body = head + bytes(table) + rec.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_pairset(data: bytes) -> PairSet:
    if len(data) < _HEADER.size + 4:
        raise PairFileError("AIPX file truncated")
    magic, version, kind, split, seed, n_pairs, n_sources = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise PairFileError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise PairFileError(f"unsupported AIPX version {version}")
    if kind >= len(_KINDS) or split >= len(_SPLITS):
        raise PairFileError("corrupt header fields")
    (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != stored_crc:
        raise PairFileError("checksum mismatch")
    pos = _HEADER.size
    sources = []
    for _ in range(n_sources):
        if pos + 2 > len(data) - 4:
            raise PairFileError("source table truncated")
        (ln,) = struct.unpack_from("<H", data, pos)
        sources.append(data[pos + 2 : pos + 2 + ln].decode("utf-8"))
        pos += 2 + ln
    expected = pos + n_pairs * RECORD.itemsize + 4
    if expected != len(data):
        raise PairFileError(f"pair payload size mismatch: expected {expected} bytes, found {len(data)}")
    rec = np.frombuffer(data, dtype=RECORD, count=n_pairs, offset=pos)
    audio = rec["source"].astype(np.uint32)
    if n_pairs and audio.max() >= n_sources:
        raise PairFileError("pair refers to an unknown audio source")
    specs = np.zeros((n_sources, 48, 48), dtype=np.float32)
    _, first = np.unique(audio, return_index=True)
    specs[audio[first]] = rec["spec"][first].reshape(-1, 48, 48)
    return PairSet(
        labels=rec["label"].copy(),
        images=rec["image"].reshape(n_pairs, 28, 28).copy(),
        image_ids=rec["image_id"].astype(np.uint32),
        audio_index=audio,
        spectrograms=specs,
        source_ids=sources,
        mapping_kind=_KINDS[kind],
        split=_SPLITS[split],
        seed=int(seed),
    )


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_pairset(path, ps: PairSet) -> int:
    """Write ``ps`` atomically; returns the CRC32 stored in the trailer."""
    data = encode_pairset(ps)
    atomic_write_bytes(path, data)
    return struct.unpack_from("<I", data, len(data) - 4)[0]


def read_pairset(path) -> PairSet:
    return decode_pairset(Path(path).read_bytes())


def file_checksum(path) -> int:
    """CRC32 trailer of an AIPX/AICK file (verified against the content)."""
    data = Path(path).read_bytes()
    (stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != stored:
        raise PairFileError(f"{path}: checksum mismatch")
    return stored
